//! Saliency metrics and their CSV reports.

mod metrics;
mod report;

pub use metrics::{
    adaptive_threshold, f_measure, mae, pr_curve, quantize, s_measure, CurvePoint, Threshold, CURVE_POINTS, S_ALPHA,
};
pub use report::{evaluate, EvalReport, ImageMetrics, ImageResult};
