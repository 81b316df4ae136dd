//! Per-image metrics on a saliency map `S ∈ [0, 1]` and a binary ground
//! truth `G`, both row-major over the same grid.

use crate::error::{Error, Result};

pub const CURVE_POINTS: usize = 256;

/// Weight of the object-aware term in the S-measure.
pub const S_ALPHA: f64 = 0.5;

/// Ceiling of the adaptive threshold, so that a saturated map still has
/// some pixels at or above it.
const ADAPTIVE_CAP: f64 = 1.0 - 1e-6;

/// SSIM stabilizers for `[0, 1]` data.
const SSIM_C1: f64 = 1e-4;
const SSIM_C2: f64 = 9e-4;

/// `round(v·255)` clamped to a byte; the resolution of stored maps.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_len(s: &[f64], g: &[bool], op: &'static str) -> Result<()> {
    if s.len() != g.len() || s.is_empty() {
        return Err(Error::shape(op, format!("map has {} pixels, ground truth {}", s.len(), g.len())));
    }
    Ok(())
}

pub fn mae(s: &[f64], g: &[bool]) -> Result<f64> {
    check_len(s, g, "mae")?;
    let total: f64 = s.iter().zip(g).map(|(&v, &b)| (v - if b { 1.0 } else { 0.0 }).abs()).sum();
    Ok(total / s.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Twice the mean saliency, capped below 1.
    Adaptive,
    Fixed(f64),
}

pub fn adaptive_threshold(s: &[f64]) -> f64 {
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    (2.0 * mean).min(ADAPTIVE_CAP)
}

/// F-measure of `S ≥ t` against `G` from exact counts. Zero when nothing
/// is predicted or nothing is foreground.
pub fn f_measure(s: &[f64], g: &[bool], threshold: Threshold, beta_sq: f64) -> Result<f64> {
    check_len(s, g, "f_measure")?;
    let t = match threshold {
        Threshold::Adaptive => adaptive_threshold(s),
        Threshold::Fixed(t) => t,
    };
    let (mut tp, mut pred, mut pos) = (0usize, 0usize, 0usize);
    for (&v, &b) in s.iter().zip(g) {
        let p = v >= t;
        tp += (p && b) as usize;
        pred += p as usize;
        pos += b as usize;
    }
    if tp == 0 {
        return Ok(0.0);
    }
    Ok(f_of(tp as f64 / pred as f64, tp as f64 / pos as f64, beta_sq))
}

/// One threshold of the precision/recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: u8,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// F from precision and recall, zero when both are.
pub(crate) fn f_of(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let d = beta_sq * precision + recall;
    if d == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / d
    }
}

/// Precision and recall at every `t = 0..=255`, predicting a pixel
/// positive when `round(S·255) ≥ t`. Precision is 1 when nothing is
/// predicted.
pub fn pr_curve(s: &[f64], g: &[bool], beta_sq: f64) -> Result<Vec<CurvePoint>> {
    check_len(s, g, "pr_curve")?;
    let mut all = [0usize; CURVE_POINTS];
    let mut fg = [0usize; CURVE_POINTS];
    for (&v, &b) in s.iter().zip(g) {
        let q = quantize(v) as usize;
        all[q] += 1;
        if b {
            fg[q] += 1;
        }
    }
    let positives: usize = fg.iter().sum();
    if positives == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let (mut pred, mut tp) = (0usize, 0usize);
    let mut points = vec![
        CurvePoint {
            threshold: 0,
            precision: 0.0,
            recall: 0.0,
            f: 0.0
        };
        CURVE_POINTS
    ];
    for t in (0..CURVE_POINTS).rev() {
        pred += all[t];
        tp += fg[t];
        let precision = if pred == 0 { 1.0 } else { tp as f64 / pred as f64 };
        let recall = tp as f64 / positives as f64;
        points[t] = CurvePoint {
            threshold: t as u8,
            precision,
            recall,
            f: f_of(precision, recall, beta_sq),
        };
    }
    Ok(points)
}

fn mean_std(x: impl Iterator<Item = f64> + Clone) -> (f64, f64, usize) {
    let n = x.clone().count();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = x.clone().sum::<f64>() / n as f64;
    let var = if n > 1 {
        x.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, var.sqrt(), n)
}

/// Object-aware similarity: how uniformly high `S` is on the foreground
/// and low on the background, weighted by the foreground fraction.
fn object_score(s: &[f64], g: &[bool]) -> f64 {
    let score = |vals: Vec<f64>| {
        let (m, sd, n) = mean_std(vals.iter().copied());
        if n == 0 {
            0.0
        } else {
            2.0 * m / (m * m + 1.0 + sd + f64::EPSILON)
        }
    };
    let fg: Vec<f64> = s.iter().zip(g).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    let bg: Vec<f64> = s.iter().zip(g).filter(|(_, &b)| !b).map(|(&v, _)| 1.0 - v).collect();
    let u = fg.len() as f64 / s.len() as f64;
    u * score(fg) + (1.0 - u) * score(bg)
}

/// Global SSIM of one rectangle of both maps.
fn region_ssim(s: &[f64], g: &[bool], w: usize, rows: (usize, usize), cols: (usize, usize)) -> f64 {
    let n = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
    let pixels = || {
        (rows.0..rows.1).flat_map(move |y| (cols.0..cols.1).map(move |x| y * w + x))
    };
    let mx = pixels().map(|i| s[i]).sum::<f64>() / n;
    let my = pixels().filter(|&i| g[i]).count() as f64 / n;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for i in pixels() {
        let dx = s[i] - mx;
        let dy = if g[i] { 1.0 } else { 0.0 } - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

/// Region-aware similarity: both maps are split into four rectangles at
/// the ground-truth centroid and the per-rectangle SSIM values are
/// averaged by area.
fn region_score(s: &[f64], g: &[bool], w: usize, h: usize) -> f64 {
    let (mut sx, mut sy, mut cnt) = (0.0, 0.0, 0.0);
    for (i, _) in g.iter().enumerate().filter(|(_, &b)| b) {
        sx += (i % w + 1) as f64;
        sy += (i / w + 1) as f64;
        cnt += 1.0;
    }
    let cx = ((sx / cnt).round() as usize).min(w);
    let cy = ((sy / cnt).round() as usize).min(h);
    let total = (w * h) as f64;
    let mut score = 0.0;
    for rows in [(0, cy), (cy, h)] {
        for cols in [(0, cx), (cx, w)] {
            let area = ((rows.1 - rows.0) * (cols.1 - cols.0)) as f64;
            if area > 0.0 {
                score += area / total * region_ssim(s, g, w, rows, cols);
            }
        }
    }
    score
}

/// Structure measure `α·S_o + (1−α)·S_r`, clamped to `[0, 1]`. An
/// all-background ground truth scores `1 − mean(S)` and an all-foreground
/// one `mean(S)`.
pub fn s_measure(s: &[f64], g: &[bool], width: usize, height: usize, alpha: f64) -> Result<f64> {
    check_len(s, g, "s_measure")?;
    if width * height != s.len() {
        return Err(Error::shape("s_measure", format!("{width}×{height} grid for {} pixels", s.len())));
    }
    let mean_s = s.iter().sum::<f64>() / s.len() as f64;
    let fg = g.iter().filter(|&&b| b).count();
    let q = if fg == 0 {
        1.0 - mean_s
    } else if fg == g.len() {
        mean_s
    } else {
        alpha * object_score(s, g) + (1.0 - alpha) * region_score(s, g, width, height)
    };
    Ok(q.clamp(0.0, 1.0))
}
