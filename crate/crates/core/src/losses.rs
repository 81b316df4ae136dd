//! Deep-supervision cross-entropy, the intractable-area F-measure loss and
//! the weighted training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::SaliencyOutputs;
use crate::tensor::{Element, Graph, Tensor, Var};

/// Guards every ratio denominator of the relaxed F-measure.
pub const F_EPS: f64 = 1e-8;

/// F-measure β² used by both the loss and the evaluation.
pub const BETA_SQ: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Side-loss weight per layer, index 0 = layer 1.
    pub alpha: Vec<f64>,
    /// Weight of the intractable-area term.
    pub beta_w: f64,
    /// β² inside the intractable-area F-measure.
    pub beta_sq: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: vec![50.0, 4.0, 4.0, 4.0, 4.0],
            beta_w: 25.0,
            beta_sq: BETA_SQ,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, layers: usize) -> Result<()> {
        if self.alpha.len() != layers {
            return Err(Error::InvalidConfig(format!(
                "{} side-loss weights for {layers} outputs",
                self.alpha.len()
            )));
        }
        let all = self.alpha.iter().chain([&self.beta_w, &self.beta_sq]);
        if all.clone().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// The same weights without the intractable-area term.
    pub fn side_only(&self) -> Self {
        LossWeights {
            beta_w: 0.0,
            ..self.clone()
        }
    }
}

pub fn check_binary<T: Element>(gt: &Tensor<T>) -> Result<()> {
    match gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::NonBinaryGroundTruth(v.to_f64_lossy())),
        None => Ok(()),
    }
}

/// Resizes `v` to the spatial size of `target` unless it already matches.
fn to_resolution<T: Element>(g: &mut Graph<T>, v: Var, target: &[usize]) -> Result<Var> {
    let s = g.shape(v);
    if s.len() != 4 || target.len() != 4 || s[0] != target[0] || s[1] != target[1] {
        return Err(Error::shape("loss", format!("output {s:?} vs ground truth {target:?}")));
    }
    if s[2] == target[2] && s[3] == target[3] {
        Ok(v)
    } else {
        g.bilinear_resize(v, target[2], target[3])
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` (upsampled to the
/// ground-truth resolution) and the binary map `gt`.
pub fn side_cross_entropy<T: Element>(g: &mut Graph<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    check_binary(gt)?;
    let l = to_resolution(g, logits, gt.shape())?;
    g.bce_with_logits(l, gt)
}

/// `1 − F_β` over the masked pixels, from relaxed counts. `mask` covers
/// the whole batch in `gt` order. `None` when every mask is empty.
pub fn iaf_loss<T: Element>(
    g: &mut Graph<T>,
    probs: Var,
    gt: &Tensor<T>,
    mask: &[bool],
    beta_sq: f64,
) -> Result<Option<Var>> {
    check_binary(gt)?;
    let p = to_resolution(g, probs, gt.shape())?;
    g.soft_f_loss(p, gt, mask, T::from_f64_lossy(beta_sq), T::from_f64_lossy(F_EPS))
}

/// Plain-number F-measure from relaxed counts over `mask`, with the same
/// ε placement as the loss. `None` when the mask is empty.
pub fn relaxed_f(p: &[f64], gt: &[f64], mask: &[bool], beta_sq: f64) -> Option<f64> {
    if !mask.iter().any(|&m| m) {
        return None;
    }
    let (mut tp, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for ((&pi, &gi), &m) in p.iter().zip(gt).zip(mask) {
        if m {
            tp += pi * gi;
            sp += pi;
            sg += gi;
        }
    }
    let prec = tp / (sp + F_EPS);
    let rec = tp / (sg + F_EPS);
    Some((1.0 + beta_sq) * prec * rec / (beta_sq * prec + rec + F_EPS))
}

/// Loss value with the prediction binarized at 0.5, for reporting.
pub fn iaf_hard(p: &[f64], gt: &[f64], mask: &[bool], beta_sq: f64) -> Option<f64> {
    let hard: Vec<f64> = p.iter().map(|&v| if v >= 0.5 { 1.0 } else { 0.0 }).collect();
    relaxed_f(&hard, gt, mask, beta_sq).map(|f| 1.0 - f)
}

/// The terms of one evaluation of the objective.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub side: Vec<Var>,
    pub iaf: Option<Var>,
    pub total: Var,
}

/// `Σ α_m·side_m + β_w·iaf`. The intractable-area term is skipped when
/// `beta_w` is zero or every mask in the batch is empty; a positive
/// `beta_w` without masks is an error.
pub fn total_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &SaliencyOutputs,
    gt: &Tensor<T>,
    mask: Option<&[bool]>,
    weights: &LossWeights,
) -> Result<LossTerms> {
    weights.validate(outputs.logits.len())?;
    let mut side = Vec::with_capacity(outputs.logits.len());
    let mut total: Option<Var> = None;
    for (&logits, &alpha) in outputs.logits.iter().zip(&weights.alpha) {
        let l = side_cross_entropy(g, logits, gt)?;
        side.push(l);
        let w = g.mul_scalar(l, T::from_f64_lossy(alpha))?;
        total = Some(match total {
            Some(t) => g.add(t, w)?,
            None => w,
        });
    }
    let mut total = total.ok_or_else(|| Error::InvalidConfig("network has no outputs".into()))?;
    let mut iaf = None;
    if weights.beta_w > 0.0 {
        let mask = mask.ok_or_else(|| Error::MissingMask("training batch".into()))?;
        iaf = iaf_loss(g, outputs.probs[0], gt, mask, weights.beta_sq)?;
        if let Some(f) = iaf {
            let w = g.mul_scalar(f, T::from_f64_lossy(weights.beta_w))?;
            total = g.add(total, w)?;
        }
    }
    Ok(LossTerms { side, iaf, total })
}
