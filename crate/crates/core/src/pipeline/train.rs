use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::diffmap::generate_difference_maps;
use super::optim::{poly_lr, Sgd, Stage, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::losses::{total_loss, LossWeights};
use crate::network::{Model, NetworkConfig};
use crate::tensor::{Element, Tensor};

/// One training example at network resolution.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub name: String,
    /// `1×C×S×S`.
    pub image: Tensor<T>,
    /// `1×1×S×S`, binary.
    pub gt: Tensor<T>,
    /// Difference mask over the `S×S` grid, row-major.
    pub mask: Option<Vec<bool>>,
}

/// Seeded stream of sample indices: a fresh permutation per epoch, with
/// batches running on across epoch boundaries.
pub struct BatchOrder {
    rng: ChaCha8Rng,
    perm: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep the stream apart from the one used for initialization
        rng.set_stream(1);
        BatchOrder {
            rng,
            perm: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.perm.is_empty() {
            if self.pos == self.perm.len() {
                self.perm.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.perm[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Loss terms after one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    /// Steps completed, starting at 1.
    pub iter: usize,
    pub lr: f64,
    pub side: Vec<f64>,
    /// Absent when the term was skipped.
    pub iaf: Option<f64>,
    pub total: f64,
}

impl LogRow {
    pub fn csv_header(layers: usize) -> String {
        let mut cols = vec!["iter".to_string(), "lr".to_string()];
        cols.extend((1..=layers).map(|m| format!("side_{m}")));
        cols.push("iaf".into());
        cols.push("total".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut cols = vec![self.iter.to_string(), self.lr.to_string()];
        cols.extend(self.side.iter().map(|v| v.to_string()));
        cols.push(self.iaf.map_or_else(String::new, |v| v.to_string()));
        cols.push(self.total.to_string());
        cols.join(",")
    }
}

fn check_data<T: Element>(data: &[Sample<T>], need_masks: bool) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    for s in data {
        match (&s.mask, need_masks) {
            (None, true) => return Err(Error::MissingMask(s.name.clone())),
            (Some(m), _) if m.len() != s.gt.numel() => {
                return Err(Error::shape(
                    "train",
                    format!("{}: mask has {} pixels, ground truth {}", s.name, m.len(), s.gt.numel()),
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Runs `cfg.max_iter` SGD steps on `model`, calling `on_iter` after each.
/// Stage 1 drops the intractable-area term; stage 2 requires a mask on
/// every sample.
pub fn train<T: Element>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    data: &[Sample<T>],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut on_iter: impl FnMut(&LogRow) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    weights.validate(model.config().layers())?;
    let weights = match cfg.stage {
        Stage::One => weights.side_only(),
        Stage::Two => weights.clone(),
    };
    let use_mask = weights.beta_w > 0.0;
    check_data(data, use_mask)?;

    let ids = model.params.trainable_ids();
    let mut order = BatchOrder::new(data.len(), cfg.seed);
    for k in 0..cfg.max_iter {
        let lr = poly_lr(k, cfg)?;
        let batch = order.next_batch(cfg.batch_size);
        let images: Vec<Tensor<T>> = batch.iter().map(|&i| data[i].image.clone()).collect();
        let gts: Vec<Tensor<T>> = batch.iter().map(|&i| data[i].gt.clone()).collect();
        let (images, gt) = (Tensor::stack_batch(&images)?, Tensor::stack_batch(&gts)?);
        let mask: Option<Vec<bool>> = use_mask.then(|| {
            batch
                .iter()
                .flat_map(|&i| data[i].mask.as_deref().unwrap_or_default().iter().copied())
                .collect()
        });

        let mut f = model.run(&images, Mode::Train)?;
        let terms = total_loss(&mut f.graph, &f.outputs, &gt, mask.as_deref(), &weights)?;
        let scalar = |v| f.graph.value(v).data()[0].to_f64_lossy();
        let row = LogRow {
            iter: k + 1,
            lr,
            side: terms.side.iter().map(|&v| scalar(v)).collect(),
            iaf: terms.iaf.map(scalar),
            total: scalar(terms.total),
        };
        if !row.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        f.graph.backward(terms.total)?;
        let grads: Vec<Tensor<T>> = ids
            .iter()
            .map(|&id| {
                f.graph
                    .grad(f.bound.var(id))
                    .unwrap_or_else(|| Tensor::zeros(model.params.value(id).shape()))
            })
            .collect();
        opt.step(&mut model.params, &grads, lr, cfg.momentum, cfg.weight_decay)?;
        model.apply_bn_updates(&f.bn_updates);
        on_iter(&row)?;
    }
    Ok(())
}

/// Products of the two-stage protocol.
pub struct TwoStage<T: Element> {
    /// The rough model; only used to produce `masks`.
    pub stage1: Model<T>,
    /// One mask per stage-2 sample.
    pub masks: Vec<Vec<bool>>,
    pub model: Model<T>,
    pub optimizer: Sgd<T>,
}

/// Stage 1 on `first` from scratch, difference masks for `second`, then a
/// fresh stage-2 model on `second`. Both models are initialized from
/// their config's seed.
pub fn run_two_stage<T: Element>(
    config: &NetworkConfig,
    first: &[Sample<T>],
    second: &[Sample<T>],
    cfg1: &TrainConfig,
    cfg2: &TrainConfig,
    weights: &LossWeights,
    mut on_iter: impl FnMut(Stage, &LogRow) -> Result<()>,
) -> Result<TwoStage<T>> {
    let cfg1 = TrainConfig {
        stage: Stage::One,
        ..cfg1.clone()
    };
    let cfg2 = TrainConfig {
        stage: Stage::Two,
        ..cfg2.clone()
    };
    let mut stage1 = Model::build(config, cfg1.seed)?;
    let mut opt = Sgd::new(&stage1.params);
    train(&mut stage1, &mut opt, first, &cfg1, weights, |r| on_iter(Stage::One, r))?;

    let inputs: Vec<(&Tensor<T>, (usize, usize))> = second
        .iter()
        .map(|s| (&s.image, (s.gt.shape()[2], s.gt.shape()[3])))
        .collect();
    let masks = generate_difference_maps(&stage1, &inputs)?;
    let masked: Vec<Sample<T>> = second
        .iter()
        .zip(&masks)
        .map(|(s, m)| Sample {
            mask: Some(m.clone()),
            ..s.clone()
        })
        .collect();

    let mut model = Model::build(config, cfg2.seed)?;
    let mut optimizer = Sgd::new(&model.params);
    train(&mut model, &mut optimizer, &masked, &cfg2, weights, |r| on_iter(Stage::Two, r))?;
    Ok(TwoStage {
        stage1,
        masks,
        model,
        optimizer,
    })
}
