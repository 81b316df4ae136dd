//! Central finite-difference verification of analytic gradients.

use rand::rngs::StdRng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default step for central differences at 64-bit precision.
pub const STEP: f64 = 1e-5;

/// Inputs closer than this to a ReLU kink or max tie are resampled.
pub const KINK_MARGIN: f64 = 1e-4;

/// Relative errors are defined as zero when both gradients are below this.
pub const BOTH_ZERO: f64 = 1e-12;

/// Denominator floor for the relative error, so gradients that are zero
/// analytically are compared against finite-difference round-off in
/// absolute terms.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(leaf, element)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if analytic.abs() < BOTH_ZERO && numeric.abs() < BOTH_ZERO {
        return 0.0;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn evaluate<F>(build: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Compares `d(build)/d(leaf)` from the tape against central differences
/// with step `step` for every element of every leaf.
///
/// Fails with [`Error::NearKink`] when the unperturbed graph sits within
/// [`KINK_MARGIN`] of a non-differentiable point; callers resample.
pub fn grad_check<F>(leaves: &[Tensor<f64>], build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.set_check_finite(true);
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars)?;
    let margin = g.kink_margin();
    if margin < KINK_MARGIN {
        return Err(Error::NearKink { margin });
    }
    let analytic: Vec<Option<Tensor<f64>>> = if g.requires_grad(root) {
        g.backward(root)?;
        vars.iter().map(|&v| g.grad(v)).collect()
    } else {
        vec![None; vars.len()]
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for e in 0..leaf.numel() {
            let orig = leaf.data()[e];
            work[li].data_mut()[e] = orig + step;
            let plus = evaluate(&build, &work)?;
            work[li].data_mut()[e] = orig - step;
            let minus = evaluate(&build, &work)?;
            work[li].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[li].as_ref().map_or(0.0, |t| t.data()[e]);
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((li, e));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Runs [`grad_check`], drawing fresh inputs from `sample` whenever the
/// previous draw landed too close to a kink.
pub fn grad_check_resampled<S, F>(
    rng: &mut StdRng,
    mut sample: S,
    build: F,
    step: f64,
    attempts: usize,
) -> Result<GradCheckReport>
where
    S: FnMut(&mut StdRng) -> Vec<Tensor<f64>>,
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut last = Error::NearKink { margin: 0.0 };
    for _ in 0..attempts.max(1) {
        let leaves = sample(rng);
        match grad_check(&leaves, &build, step) {
            Err(e @ Error::NearKink { .. }) => last = e,
            other => return other,
        }
    }
    Err(last)
}
