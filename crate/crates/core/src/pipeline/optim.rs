use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    /// Cross-entropy only, from scratch.
    One,
    /// Full objective with difference masks.
    Two,
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            max_iter: 2000,
            batch_size: 4,
            seed: 0,
            stage: Stage::Two,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("max_iter and batch_size must be at least 1".into()));
        }
        let rates = [self.initial_lr, self.power, self.momentum, self.weight_decay];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig("rates must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `initial_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iter {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond max_iter {}",
            cfg.max_iter
        )));
    }
    let frac = 1.0 - iter as f64 / cfg.max_iter as f64;
    Ok(cfg.initial_lr * frac.powf(cfg.power))
}

/// SGD with momentum and decoupled-from-BN weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    /// One velocity per trainable parameter, in `trainable_ids` order.
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Element> Sgd<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Sgd {
            velocity: params
                .trainable_ids()
                .into_iter()
                .map(|id| Tensor::zeros(params.value(id).shape()))
                .collect(),
        }
    }

    /// `grads` follows `trainable_ids` order.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Tensor<T>],
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<()> {
        let ids = params.trainable_ids();
        if grads.len() != ids.len() || self.velocity.len() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients and {} velocities for {} parameters",
                grads.len(),
                self.velocity.len(),
                ids.len()
            )));
        }
        for ((&id, g), v) in ids.iter().zip(grads).zip(&self.velocity) {
            let p = params.get(id);
            if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{} is {:?}, gradient {:?}", p.name, p.value.shape(), g.shape()),
                ));
            }
        }
        let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum));
        for ((&id, g), v) in ids.iter().zip(grads).zip(&mut self.velocity) {
            let decay = if params.get(id).kind.decays() {
                T::from_f64_lossy(weight_decay)
            } else {
                T::zero()
            };
            let p = params.value_mut(id).data_mut();
            for ((pi, vi), &gi) in p.iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi + gi + decay * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }
}
