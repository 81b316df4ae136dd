//! Metric and loss values on small crafted maps against hand values and
//! brute-force recomputation.

use ognet::evaluation::{f_measure, mae, pr_curve, s_measure, Threshold, S_ALPHA};
use ognet::losses::{iaf_loss, F_EPS};
use ognet::tensor::{Graph, Tensor};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::Check;

pub const TOL: f64 = 1e-12;
pub const S_TOL: f64 = 1e-9;

fn bits(v: &[u8]) -> Vec<bool> {
    v.iter().map(|&b| b == 1).collect()
}

/// `(map, ground truth, mae, F at 0.5, adaptive F)` worked by hand.
pub fn hand_cases() -> Vec<(Vec<f64>, Vec<bool>, f64, f64, f64)> {
    vec![
        // TP = FP = FN = 1 at 0.5; the adaptive threshold 1.0 predicts nothing
        (vec![0.9, 0.8, 0.2, 0.1], bits(&[1, 0, 1, 0]), 0.45, 0.5, 0.0),
        (vec![1.0, 0.0, 0.5, 0.0], bits(&[1, 0, 0, 0]), 0.125, 0.65 / 1.15, 1.0),
        // mean 0.15 gives threshold 0.3, so P = 1 and R = 1/2
        (vec![0.4, 0.2, 0.0, 0.0], bits(&[1, 1, 0, 0]), 0.35, 0.0, 0.65 / 0.8),
        (vec![1.0, 1.0, 0.0, 0.0], bits(&[1, 1, 0, 0]), 0.0, 1.0, 1.0),
        (vec![0.0, 0.0, 1.0, 1.0], bits(&[1, 1, 0, 0]), 1.0, 0.0, 0.0),
    ]
}

pub fn mae_and_f() -> Vec<Check> {
    let (mut e_mae, mut e_f, mut e_fa) = (0.0f64, 0.0f64, 0.0f64);
    for (s, g, m, f, fa) in hand_cases() {
        e_mae = e_mae.max((mae(&s, &g).unwrap() - m).abs());
        e_f = e_f.max((f_measure(&s, &g, Threshold::Fixed(0.5), 0.3).unwrap() - f).abs());
        e_fa = e_fa.max((f_measure(&s, &g, Threshold::Adaptive, 0.3).unwrap() - fa).abs());
    }
    vec![
        Check::new("mae hand values", e_mae, TOL),
        Check::new("F-measure at 0.5 hand values", e_f, TOL),
        Check::new("adaptive F-measure hand values", e_fa, TOL),
    ]
}

/// Per-threshold precision and recall by direct counting.
pub fn brute_pr(s: &[f64], g: &[bool], t: u8) -> (f64, f64) {
    let mut tp = 0.0;
    let mut pred = 0.0;
    let mut pos = 0.0;
    for i in 0..s.len() {
        let p = (s[i] * 255.0).round() >= t as f64;
        if p {
            pred += 1.0;
        }
        if g[i] {
            pos += 1.0;
        }
        if p && g[i] {
            tp += 1.0;
        }
    }
    (if pred == 0.0 { 1.0 } else { tp / pred }, tp / pos)
}

/// Crafted 4×4 and 3×3 maps covering exact grid values, rounding
/// boundaries and saturated pixels.
pub fn pr_maps() -> Vec<(Vec<f64>, Vec<bool>)> {
    let mut rng = StdRng::seed_from_u64(41);
    let mut maps = vec![
        (
            vec![0.0, 1.0, 0.5, 0.25, 0.75, 0.1, 0.9, 0.3, 0.6, 0.2, 0.8, 0.4, 0.05, 0.95, 0.35, 0.65],
            bits(&[0, 1, 1, 0, 1, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1]),
        ),
        (
            vec![0.5 / 255.0, 1.5 / 255.0, 254.5 / 255.0, 127.0 / 255.0, 128.0 / 255.0, 0.0, 1.0, 0.5, 0.5],
            bits(&[0, 0, 1, 1, 0, 0, 1, 1, 0]),
        ),
    ];
    for _ in 0..6 {
        let s: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut g: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.4)).collect();
        g[0] = true;
        maps.push((s, g));
    }
    maps
}

pub fn pr_curve_points() -> Check {
    let mut err = 0.0f64;
    let mut points = 0;
    for (s, g) in pr_maps() {
        let curve = pr_curve(&s, &g, 0.3).unwrap();
        if curve.len() != 256 {
            return Check::failed("pr curve, all 256 thresholds", TOL, format!("{} points", curve.len()));
        }
        for (t, pt) in curve.iter().enumerate() {
            let (p, r) = brute_pr(&s, &g, t as u8);
            let f = if p + r == 0.0 { 0.0 } else { 1.3 * p * r / (0.3 * p + r) };
            err = err.max((pt.precision - p).abs()).max((pt.recall - r).abs()).max((pt.f - f).abs());
            points += 1;
        }
    }
    let mut c = Check::new("pr curve, all 256 thresholds", err, TOL);
    c.note = Some(format!("({points} points)"));
    c
}

/// The loss value straight from relaxed counts, including the ε guards.
pub fn iaf_brute(p: &[f64], g: &[f64], mask: &[bool], beta_sq: f64) -> f64 {
    let (mut tp, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if mask[i] {
            tp += p[i] * g[i];
            sp += p[i];
            sg += g[i];
        }
    }
    let prec = tp / (sp + F_EPS);
    let rec = tp / (sg + F_EPS);
    1.0 - (1.0 + beta_sq) * prec * rec / (beta_sq * prec + rec + F_EPS)
}

pub fn iaf_value(p: &[f64], gt: &[f64], mask: &[bool], beta_sq: f64) -> Option<f64> {
    let shape = [1, 1, 1, p.len()];
    let mut g = Graph::new();
    let pv = g.constant(Tensor::from_f64(&shape, p).unwrap());
    let gt = Tensor::from_f64(&shape, gt).unwrap();
    iaf_loss(&mut g, pv, &gt, mask, beta_sq).unwrap().map(|v| g.value(v).data()[0])
}

pub fn iaf_values() -> Check {
    let mut rng = StdRng::seed_from_u64(42);
    let mut cases = vec![
        (vec![1.0, 1.0, 0.0, 0.0], vec![1.0, 0.0, 1.0, 0.0], vec![true; 4]),
        (vec![0.9, 0.2, 0.7, 0.4], vec![1.0, 0.0, 0.0, 1.0], vec![true, false, true, true]),
    ];
    for _ in 0..20 {
        let p: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..16).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mut m: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
        m[3] = true;
        cases.push((p, g, m));
    }
    let mut err = 0.0f64;
    for (p, g, m) in &cases {
        match iaf_value(p, g, m, 0.3) {
            Some(v) => err = err.max((v - iaf_brute(p, g, m, 0.3)).abs()),
            None => return Check::failed("intractable-area loss values", TOL, "term skipped on a non-empty mask"),
        }
    }
    Check::new("intractable-area loss values", err, TOL)
}

pub fn s_measure_identity() -> Check {
    let mut rng = StdRng::seed_from_u64(43);
    let mut err = 0.0f64;
    for _ in 0..20 {
        let (w, h) = (rng.gen_range(2..17), rng.gen_range(2..17));
        let density = rng.gen_range(0.05..0.95);
        let g: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(density)).collect();
        let s: Vec<f64> = g.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        err = err.max((s_measure(&s, &g, w, h, S_ALPHA).unwrap() - 1.0).abs());
    }
    Check::new("s_measure(G, G) on 20 masks", err, S_TOL)
}

pub fn suite() -> Vec<Check> {
    let mut all = mae_and_f();
    all.push(pr_curve_points());
    all.push(iaf_values());
    all.push(s_measure_identity());
    all
}

