//! Parameterized building blocks: convolution, fully connected, batch norm.

use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamKind, ParamSet};
use crate::tensor::{Element, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Running-statistic update produced by one train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, T: Element> {
    pub g: &'a mut Graph<T>,
    pub params: &'a ParamSet<T>,
    pub bound: &'a Bound,
    pub mode: Mode,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a ParamSet<T>, bound: &'a Bound, mode: Mode) -> Self {
        Ctx {
            g,
            params,
            bound,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }
}

/// Folds batch statistics into the running buffers.
pub fn apply_bn_updates<T: Element>(params: &mut ParamSet<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in params.value_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in params.value_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Square `kernel×kernel` convolution, stride 1, same padding.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let weight = ps.push(
            format!("{name}.weight"),
            ParamKind::Weight,
            init.he_normal(&[out_c, in_c, kernel, kernel], fan_in),
        )?;
        let bias = if bias {
            Some(ps.push(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_c]))?)
        } else {
            None
        };
        Ok(Conv {
            weight,
            bias,
            kernel,
            stride: 1,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Element>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        in_f: usize,
        out_f: usize,
    ) -> Result<Self> {
        let weight = ps.push(
            format!("{name}.weight"),
            ParamKind::Weight,
            init.he_normal(&[out_f, in_f], in_f),
        )?;
        let bias = ps.push(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[out_f]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Element>(ps: &mut ParamSet<T>, name: &str, c: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: ps.push(format!("{name}.gamma"), ParamKind::NormScale, Tensor::full(&[c], T::one()))?,
            beta: ps.push(format!("{name}.beta"), ParamKind::NormShift, Tensor::zeros(&[c]))?,
            running_mean: ps.push(format!("{name}.running_mean"), ParamKind::RunningMean, Tensor::zeros(&[c]))?,
            running_var: ps.push(
                format!("{name}.running_var"),
                ParamKind::RunningVar,
                Tensor::full(&[c], T::one()),
            )?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::from_f64_lossy(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.g.batchnorm_train(x, gamma, beta, eps)?;
                let n = T::from_usize(stats.count).unwrap();
                let unbias = if stats.count > 1 { n / (n - T::one()) } else { T::one() };
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.var.iter().map(|&v| v * unbias).collect(),
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = ctx.params.value(self.running_mean).data();
                let var = ctx.params.value(self.running_var).data();
                ctx.g.batchnorm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// Convolution (no bias) followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element>(
        ps: &mut ParamSet<T>,
        init: &mut Init,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new(ps, init, name, in_c, out_c, kernel, false)?,
            bn: BatchNorm::new(ps, &format!("{name}.bn"), out_c)?,
        })
    }

    pub fn forward<T: Element>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.g.relu(y)
    }
}
