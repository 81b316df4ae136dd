//! Channel attention, output-guided spatial attention and the ablation
//! variants built from them.
//!
//! Every variant refines a decoder feature map `F` of shape `N×C×H×W` and
//! returns a map of the same shape:
//!
//! * `none`: identity.
//! * `se`: `W_c ⊙ F` with per-channel gates from max- and average-pooled
//!   statistics through a shared two-layer bottleneck.
//! * `cbam`: `W_s ⊙ (W_c ⊙ F)` where `W_s` is a 7×7 convolution over the
//!   channel max and mean planes of `W_c ⊙ F`.
//! * `ogam`: as `cbam`, but the spatial convolution also sees the side-output
//!   logits of every deeper layer, each scaled by a learned gate `V_j`. The
//!   gates come from a selector that pools the refined map together with
//!   the deeper layers' attention outputs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv, Ctx, Linear};
use crate::params::{Init, ParamSet};
use crate::tensor::{Element, ScaleAxis, Var};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    None,
    Se,
    Cbam,
    Ogam,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 4] = [
        AttentionKind::None,
        AttentionKind::Se,
        AttentionKind::Cbam,
        AttentionKind::Ogam,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Se => "se",
            AttentionKind::Cbam => "cbam",
            AttentionKind::Ogam => "ogam",
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attention kind {s:?}")))
    }
}

/// Width of the bottleneck between the two fully connected layers.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 4).max(1)
}

/// Side information from the layers deeper than the current one, ordered
/// from the next-deeper layer to the deepest.
#[derive(Clone, Copy, Debug, Default)]
pub struct Guidance<'a> {
    /// Pre-sigmoid side-output logits, `N×1×h×w` each.
    pub logits: &'a [Var],
    /// Attention-refined feature maps of those layers.
    pub maps: &'a [Var],
}

impl Guidance<'_> {
    pub fn is_empty(&self) -> bool {
        self.logits.is_empty() && self.maps.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub l1: Linear,
    pub l2: Linear,
}

impl ChannelAttention {
    pub fn new<T: Element>(ps: &mut ParamSet<T>, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        let hidden = hidden_width(channels);
        Ok(ChannelAttention {
            channels,
            l1: Linear::new(ps, init, &format!("{name}.l1"), channels, hidden)?,
            l2: Linear::new(ps, init, &format!("{name}.l2"), hidden, channels)?,
        })
    }

    fn mlp<T: Element>(&self, ctx: &mut Ctx<'_, T>, pooled: Var, n: usize) -> Result<Var> {
        let flat = ctx.g.reshape(pooled, &[n, self.channels])?;
        let h = self.l1.forward(ctx, flat)?;
        let h = ctx.g.relu(h)?;
        self.l2.forward(ctx, h)
    }

    /// Channel gates `W_c`, shape `N×C×1×1`.
    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let (n, c) = (ctx.g.shape(f)[0], ctx.g.shape(f)[1]);
        if c != self.channels {
            return Err(Error::ChannelMismatch {
                op: "channel_attention",
                expected: self.channels,
                actual: c,
            });
        }
        let gmp = ctx.g.global_max_pool(f)?;
        let gap = ctx.g.global_avg_pool(f)?;
        let a = self.mlp(ctx, gmp, n)?;
        let b = self.mlp(ctx, gap, n)?;
        let s = ctx.g.add(a, b)?;
        let w = ctx.g.sigmoid(s)?;
        ctx.g.reshape(w, &[n, c, 1, 1])
    }
}

/// Produces the gate vector `V` over the deeper side outputs.
#[derive(Clone, Debug)]
pub struct Selector {
    pub in_channels: usize,
    pub l1: Linear,
    pub l2: Linear,
}

#[derive(Clone, Debug)]
pub struct SpatialAttention {
    /// Number of deeper side outputs this layer is guided by.
    pub deeper: usize,
    pub conv: Conv,
    pub selector: Option<Selector>,
}

/// Intermediate values of one spatial attention pass.
#[derive(Clone, Copy, Debug)]
pub struct SpatialTrace {
    pub gate: Var,
    /// `N×(2+k)×H×W` planes fed to the 7×7 convolution.
    pub planes: Var,
    /// `N×k` guidance weights, absent when `k = 0`.
    pub v: Option<Var>,
}

impl SpatialAttention {
    /// `deeper_channels` lists the refined-map widths of the guiding layers;
    /// pass an empty slice for self-only spatial attention.
    pub fn new<T: Element>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        channels: usize,
        deeper_channels: &[usize],
    ) -> Result<Self> {
        let deeper = deeper_channels.len();
        let conv = Conv::new(ps, init, &format!("{name}.conv"), 2 + deeper, 1, SPATIAL_KERNEL, true)?;
        let selector = if deeper > 0 {
            let in_channels = channels + deeper_channels.iter().sum::<usize>();
            let hidden = hidden_width(in_channels);
            Some(Selector {
                in_channels,
                l1: Linear::new(ps, init, &format!("{name}.selector.l1"), in_channels, hidden)?,
                l2: Linear::new(ps, init, &format!("{name}.selector.l2"), hidden, deeper)?,
            })
        } else {
            None
        };
        Ok(SpatialAttention { deeper, conv, selector })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, f: Var, guidance: Guidance<'_>) -> Result<SpatialTrace> {
        if guidance.logits.len() != self.deeper || guidance.maps.len() != self.deeper {
            return Err(Error::InvalidArgument(format!(
                "spatial attention expects {} deeper outputs and maps, got {} and {}",
                self.deeper,
                guidance.logits.len(),
                guidance.maps.len()
            )));
        }
        let shape = ctx.g.shape(f).to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let stats = ctx.g.channel_stats(f)?;
        let (planes, v) = match &self.selector {
            None => (stats, None),
            Some(sel) => {
                // pooling is per channel, so pooling each map before the
                // concatenation gives the same vector without the wide copy
                let mut pooled = vec![ctx.g.global_avg_pool(f)?];
                for &m in guidance.maps {
                    let r = ctx.g.bilinear_resize(m, h, w)?;
                    pooled.push(ctx.g.global_avg_pool(r)?);
                }
                let pooled = ctx.g.concat_channels(&pooled)?;
                if ctx.g.shape(pooled)[1] != sel.in_channels {
                    return Err(Error::ChannelMismatch {
                        op: "selector",
                        expected: sel.in_channels,
                        actual: ctx.g.shape(pooled)[1],
                    });
                }
                let flat = ctx.g.reshape(pooled, &[n, sel.in_channels])?;
                let hid = sel.l1.forward(ctx, flat)?;
                let hid = ctx.g.relu(hid)?;
                let v = sel.l2.forward(ctx, hid)?;
                let v = ctx.g.sigmoid(v)?;

                let mut resized = Vec::with_capacity(self.deeper);
                for &o in guidance.logits {
                    resized.push(ctx.g.bilinear_resize(o, h, w)?);
                }
                let outs = ctx.g.concat_channels(&resized)?;
                let weighted = ctx.g.broadcast_scale(outs, v, ScaleAxis::Scalar)?;
                (ctx.g.concat_channels(&[stats, weighted])?, Some(v))
            }
        };
        let logit = self.conv.forward(ctx, planes)?;
        let gate = ctx.g.sigmoid(logit)?;
        Ok(SpatialTrace { gate, planes, v })
    }
}

/// Intermediate values of one attention pass, for inspection in tests.
#[derive(Clone, Copy, Debug)]
pub struct AttentionTrace {
    pub output: Var,
    pub channel_gate: Option<Var>,
    pub spatial: Option<SpatialTrace>,
}

/// One configured attention module.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub kind: AttentionKind,
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
}

impl AttentionBlock {
    /// `deeper_channels` is only consulted for `ogam`.
    pub fn new<T: Element>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        kind: AttentionKind,
        channels: usize,
        deeper_channels: &[usize],
    ) -> Result<Self> {
        let channel = match kind {
            AttentionKind::None => None,
            _ => Some(ChannelAttention::new(ps, init, &format!("{name}.channel"), channels)?),
        };
        let spatial = match kind {
            AttentionKind::None | AttentionKind::Se => None,
            AttentionKind::Cbam => Some(SpatialAttention::new(ps, init, &format!("{name}.spatial"), channels, &[])?),
            AttentionKind::Ogam => Some(SpatialAttention::new(
                ps,
                init,
                &format!("{name}.spatial"),
                channels,
                deeper_channels,
            )?),
        };
        Ok(AttentionBlock { kind, channel, spatial })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, f: Var, guidance: Guidance<'_>) -> Result<Var> {
        Ok(self.trace(ctx, f, guidance)?.output)
    }

    pub fn trace<T: Element>(&self, ctx: &mut Ctx<'_, T>, f: Var, guidance: Guidance<'_>) -> Result<AttentionTrace> {
        if self.kind != AttentionKind::Ogam && !guidance.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} attention does not take deeper outputs",
                self.kind
            )));
        }
        let mut trace = AttentionTrace {
            output: f,
            channel_gate: None,
            spatial: None,
        };
        if let Some(ca) = &self.channel {
            let wc = ca.forward(ctx, f)?;
            trace.output = ctx.g.broadcast_scale(f, wc, ScaleAxis::Channel)?;
            trace.channel_gate = Some(wc);
        }
        if let Some(sa) = &self.spatial {
            let st = sa.forward(ctx, trace.output, guidance)?;
            trace.output = ctx.g.broadcast_scale(trace.output, st.gate, ScaleAxis::Spatial)?;
            trace.spatial = Some(st);
        }
        Ok(trace)
    }
}
