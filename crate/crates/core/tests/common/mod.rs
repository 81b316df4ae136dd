//! Check suites shared by the module tests and the acceptance run.
#![allow(dead_code)]

pub mod bin;
pub mod equivalence;
pub mod gradients;
pub mod oracles;

use std::fmt;

use ognet::tensor::Tensor;
use rand::rngs::StdRng;
use rand::Rng;

/// One named measurement against a limit.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub limit: f64,
    pub note: Option<String>,
}

impl Check {
    pub fn new(name: impl Into<String>, error: f64, limit: f64) -> Self {
        Check {
            name: name.into(),
            error,
            limit,
            note: None,
        }
    }

    pub fn failed(name: impl Into<String>, limit: f64, note: impl fmt::Display) -> Self {
        Check {
            name: name.into(),
            error: f64::INFINITY,
            limit,
            note: Some(note.to_string()),
        }
    }

    pub fn passed(&self) -> bool {
        self.error.is_finite() && self.error <= self.limit
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:.3e} (limit {:.0e})", self.name, self.error, self.limit)?;
        if let Some(n) = &self.note {
            write!(f, " {n}")?;
        }
        Ok(())
    }
}

/// Panics listing every failed check.
pub fn assert_all(checks: &[Check]) {
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed()).map(|c| c.to_string()).collect();
    assert!(failed.is_empty(), "failed checks:\n{}", failed.join("\n"));
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rand_t(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn binary(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
}
