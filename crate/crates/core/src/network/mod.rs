//! Encoder backbone, the multi-output decoder and the full forward pass.

mod config;

pub use config::{DecoderLayerSpec, NetworkConfig, StageSpec, CONV_E_SIZES};

use crate::attention::{AttentionBlock, AttentionKind, Guidance};
use crate::error::{Error, Result};
use crate::layers::{apply_bn_updates, BnUpdate, Conv, ConvBnRelu, Ctx, Mode};
use crate::params::{Bound, Init, ParamSet};
use crate::tensor::{Element, Graph, Tensor, Var};

const DECODER_KERNEL: usize = 3;
const HEAD_KERNEL: usize = 3;

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub conv_e: ConvBnRelu,
    pub conv_d: ConvBnRelu,
    pub conv_1: ConvBnRelu,
    pub conv_2: ConvBnRelu,
    /// 1×1 linear projection of the upsampled decoder input.
    pub residual: Option<Conv>,
    pub attention: AttentionBlock,
    pub head: Conv,
}

/// Values produced by one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// Decoder output before attention.
    pub features: Var,
    /// Attention-refined features, fed to the next layer and the head.
    pub refined: Var,
    pub logits: Var,
}

impl DecoderLayer {
    /// `dec` must be exactly half the spatial size of `enc`.
    pub fn forward<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        enc: Var,
        dec: Var,
        guidance: Guidance<'_>,
    ) -> Result<LayerOutput> {
        let es = ctx.g.shape(enc).to_vec();
        let ds = ctx.g.shape(dec).to_vec();
        if es.len() != 4 || ds.len() != 4 || es[0] != ds[0] || es[2] != 2 * ds[2] || es[3] != 2 * ds[3] {
            return Err(Error::shape(
                "decoder_layer",
                format!("encoder feature {es:?} is not twice decoder feature {ds:?}"),
            ));
        }
        let up = ctx.g.bilinear_resize(dec, es[2], es[3])?;
        let d = self.conv_d.forward(ctx, up)?;
        let e = self.conv_e.forward(ctx, enc)?;
        let cat = ctx.g.concat_channels(&[e, d])?;
        let x = self.conv_1.forward(ctx, cat)?;
        let mut features = self.conv_2.forward(ctx, x)?;
        if let Some(proj) = &self.residual {
            let shortcut = proj.forward(ctx, up)?;
            features = ctx.g.add(features, shortcut)?;
        }
        let refined = self.attention.forward(ctx, features, guidance)?;
        let logits = self.head.forward(ctx, refined)?;
        Ok(LayerOutput {
            features,
            refined,
            logits,
        })
    }
}

/// Parameter layout of a network; independent of scalar precision.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: NetworkConfig,
    pub stages: Vec<Vec<ConvBnRelu>>,
    /// `layers[0]` is layer 1 (shallowest).
    pub layers: Vec<DecoderLayer>,
}

/// The side outputs of one forward pass; index 0 is layer 1.
#[derive(Clone, Debug)]
pub struct SaliencyOutputs {
    pub logits: Vec<Var>,
    pub probs: Vec<Var>,
}

impl Architecture {
    /// Registers every parameter in `ps`, drawing initial weights from `seed`.
    pub fn build<T: Element>(config: &NetworkConfig, ps: &mut ParamSet<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut stages = Vec::with_capacity(config.backbone.len());
        let mut in_c = config.in_channels;
        for (s, spec) in config.backbone.iter().enumerate() {
            let mut convs = Vec::with_capacity(spec.convs);
            for k in 0..spec.convs {
                let name = format!("encoder.stage{}.conv{}", s + 1, k + 1);
                convs.push(ConvBnRelu::new(ps, &mut init, &name, in_c, spec.channels, 3)?);
                in_c = spec.channels;
            }
            stages.push(convs);
        }

        let m_count = config.decoder.len();
        let mut layers = Vec::with_capacity(m_count);
        for m in (0..m_count).rev() {
            let row = config.decoder[m];
            let enc_c = config.backbone[m].channels;
            let dec_c = if m + 1 == m_count {
                config.backbone[m_count - 1].channels
            } else {
                config.decoder[m + 1].conv_2
            };
            let deeper: Vec<usize> = config.decoder[m + 1..].iter().map(|r| r.conv_2).collect();
            let p = format!("decoder.layer{}", m + 1);
            let cbr = |ps: &mut ParamSet<T>, init: &mut Init, n: &str, i, o, k| {
                ConvBnRelu::new(ps, init, &format!("{p}.{n}"), i, o, k)
            };
            let conv_e = cbr(ps, &mut init, "conv_e", enc_c, row.conv_e, config.conv_e_size)?;
            let conv_d = cbr(ps, &mut init, "conv_d", dec_c, row.conv_d, DECODER_KERNEL)?;
            let conv_1 = cbr(ps, &mut init, "conv_1", row.conv_e + row.conv_d, row.conv_1, DECODER_KERNEL)?;
            let conv_2 = cbr(ps, &mut init, "conv_2", row.conv_1, row.conv_2, DECODER_KERNEL)?;
            let residual = if config.residual {
                Some(Conv::new(ps, &mut init, &format!("{p}.residual"), dec_c, row.conv_2, 1, true)?)
            } else {
                None
            };
            let attention = AttentionBlock::new(
                ps,
                &mut init,
                &format!("{p}.attention"),
                config.attention,
                row.conv_2,
                &deeper,
            )?;
            let head = Conv::new(ps, &mut init, &format!("{p}.head"), row.conv_2, 1, HEAD_KERNEL, true)?;
            layers.push(DecoderLayer {
                conv_e,
                conv_d,
                conv_1,
                conv_2,
                residual,
                attention,
                head,
            });
        }
        layers.reverse();
        Ok(Architecture {
            config: config.clone(),
            stages,
            layers,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let stride = self.config.stride();
        match *shape {
            [n, c, h, w] if n > 0 && c == self.config.in_channels => {
                if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
                    Err(Error::InvalidArgument(format!(
                        "input {h}×{w} is not a positive multiple of the encoder stride {stride}"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Err(Error::shape(
                "ognet_forward",
                format!("expected N×{}×H×W image batch, got {shape:?}", self.config.in_channels),
            )),
        }
    }

    /// Skip features of every stage plus the final pooled feature.
    pub fn encode<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<(Vec<Var>, Var)> {
        let mut x = image;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for conv in stage {
                x = conv.forward(ctx, x)?;
            }
            skips.push(x);
            x = ctx.g.max_pool(x, 2)?;
        }
        Ok((skips, x))
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<SaliencyOutputs> {
        Ok(self.forward_layers(ctx, image)?.0)
    }

    /// Forward pass that also returns every layer's intermediate values.
    pub fn forward_layers<T: Element>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: Var,
    ) -> Result<(SaliencyOutputs, Vec<LayerOutput>)> {
        self.check_input(ctx.g.shape(image))?;
        let (skips, mut dec) = self.encode(ctx, image)?;
        let m_count = self.layers.len();
        // deepest first, then prepend so index 0 stays layer 1
        let mut outs: Vec<LayerOutput> = Vec::with_capacity(m_count);
        let mut logits: Vec<Var> = Vec::with_capacity(m_count);
        let mut maps: Vec<Var> = Vec::with_capacity(m_count);
        for m in (0..m_count).rev() {
            let guidance = if self.config.attention == AttentionKind::Ogam {
                Guidance {
                    logits: &logits,
                    maps: &maps,
                }
            } else {
                Guidance::default()
            };
            let out = self.layers[m].forward(ctx, skips[m], dec, guidance)?;
            dec = out.refined;
            logits.insert(0, out.logits);
            maps.insert(0, out.refined);
            outs.insert(0, out);
        }
        let mut probs = Vec::with_capacity(m_count);
        for &l in &logits {
            probs.push(ctx.g.sigmoid(l)?);
        }
        Ok((SaliencyOutputs { logits, probs }, outs))
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Element> {
    pub arch: Architecture,
    pub params: ParamSet<T>,
}

/// Result of one forward pass on a fresh graph.
pub struct Forward<T: Element> {
    pub graph: Graph<T>,
    /// Graph handles of the parameters.
    pub bound: Bound,
    pub outputs: SaliencyOutputs,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Element> Model<T> {
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let arch = Architecture::build(config, &mut params, seed)?;
        Ok(Model { arch, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.arch.config
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }

    /// Runs the network on `images`. In [`Mode::Train`] parameters are
    /// gradient leaves and batch statistics are returned for
    /// [`apply_bn_updates`].
    pub fn run(&self, images: &Tensor<T>, mode: Mode) -> Result<Forward<T>> {
        let mut graph = Graph::new();
        let bound = self.params.bind(&mut graph, mode == Mode::Train);
        let x = graph.constant(images.clone());
        let mut ctx = Ctx::new(&mut graph, &self.params, &bound, mode);
        let outputs = self.arch.forward(&mut ctx, x)?;
        let bn_updates = std::mem::take(&mut ctx.bn_updates);
        Ok(Forward {
            graph,
            bound,
            outputs,
            bn_updates,
        })
    }

    /// Eval-mode saliency probabilities of every layer, index 0 = layer 1.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let f = self.run(images, Mode::Eval)?;
        Ok(f.outputs.probs.iter().map(|&p| f.graph.value(p).clone()).collect())
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.params, updates);
    }
}
