use super::metrics::{f_measure, f_of, mae, pr_curve, s_measure, CurvePoint, Threshold, CURVE_POINTS, S_ALPHA};
use crate::error::{Error, Result};
use crate::losses::BETA_SQ;

/// A saliency map paired with its ground truth.
#[derive(Clone, Debug)]
pub struct ImageResult {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub map: Vec<f64>,
    pub gt: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub mae: f64,
    pub f_adaptive: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// In input order.
    pub images: Vec<ImageMetrics>,
    pub mean_mae: f64,
    pub mean_f: f64,
    pub mean_s: f64,
    /// Precision and recall averaged over images at each threshold; `f`
    /// is computed from the averages.
    pub curve: Vec<CurvePoint>,
}

pub fn evaluate(results: &[ImageResult]) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut images = Vec::with_capacity(results.len());
    let mut p_sum = vec![0.0; CURVE_POINTS];
    let mut r_sum = vec![0.0; CURVE_POINTS];
    for r in results {
        images.push(ImageMetrics {
            name: r.name.clone(),
            mae: mae(&r.map, &r.gt)?,
            f_adaptive: f_measure(&r.map, &r.gt, Threshold::Adaptive, BETA_SQ)?,
            s: s_measure(&r.map, &r.gt, r.width, r.height, S_ALPHA)?,
        });
        for (k, pt) in pr_curve(&r.map, &r.gt, BETA_SQ)?.iter().enumerate() {
            p_sum[k] += pt.precision;
            r_sum[k] += pt.recall;
        }
    }
    let n = results.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| images.iter().map(f).sum::<f64>() / n;
    let curve = (0..CURVE_POINTS)
        .map(|k| {
            let (precision, recall) = (p_sum[k] / n, r_sum[k] / n);
            CurvePoint {
                threshold: k as u8,
                precision,
                recall,
                f: f_of(precision, recall, BETA_SQ),
            }
        })
        .collect();
    Ok(EvalReport {
        mean_mae: mean(|m| m.mae),
        mean_f: mean(|m| m.f_adaptive),
        mean_s: mean(|m| m.s),
        images,
        curve,
    })
}

impl EvalReport {
    /// One row per image, then a `mean` row.
    pub fn eval_csv(&self) -> String {
        let mut out = String::from("image,mae,f_adaptive,s\n");
        for m in &self.images {
            out.push_str(&format!("{},{},{},{}\n", m.name, m.mae, m.f_adaptive, m.s));
        }
        out.push_str(&format!("mean,{},{},{}\n", self.mean_mae, self.mean_f, self.mean_s));
        out
    }

    pub fn curves_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{},{}\n", p.threshold, p.precision, p.recall, p.f));
        }
        out
    }
}
