//! Procedural saliency dataset: one to three filled shapes in distinct
//! colors over a textured background, with exact binary masks.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image_io::{write_image, Image};
use super::manifest::{Entry, Manifest};
use crate::error::{Error, Result};

/// Accepted range of the foreground fraction of a generated mask.
pub const FG_RANGE: (f64, f64) = (0.02, 0.6);

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, angle: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Shape {
        let cx = rng.gen_range(0.15..0.85) * size;
        let cy = rng.gen_range(0.15..0.85) * size;
        let r = rng.gen_range(0.08..0.3) * size;
        let angle = rng.gen_range(0.0..TAU);
        match rng.gen_range(0..3) {
            0 => Shape::Ellipse {
                cx,
                cy,
                rx: r * rng.gen_range(0.6..1.0),
                ry: r * rng.gen_range(0.6..1.0),
                angle,
            },
            1 => Shape::Rect {
                cx,
                cy,
                hw: r * rng.gen_range(0.5..0.9),
                hh: r * rng.gen_range(0.5..0.9),
                angle,
            },
            _ => {
                let mut pts = [(0.0, 0.0); 3];
                for (k, p) in pts.iter_mut().enumerate() {
                    let a = angle + k as f64 * TAU / 3.0 + rng.gen_range(-0.4..0.4);
                    let d = r * rng.gen_range(0.7..1.0);
                    *p = (cx + d * a.cos(), cy + d * a.sin());
                }
                Shape::Triangle { pts }
            }
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let rotate = |cx: f64, cy: f64, a: f64| {
            let (dx, dy) = (x - cx, y - cy);
            (dx * a.cos() + dy * a.sin(), -dx * a.sin() + dy * a.cos())
        };
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (u, v) = rotate(cx, cy, angle);
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Rect { cx, cy, hw, hh, angle } => {
                let (u, v) = rotate(cx, cy, angle);
                u.abs() <= hw && v.abs() <= hh
            }
            Shape::Triangle { pts: [a, b, c] } => {
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0);
                let (d1, d2, d3) = (side(a, b), side(b, c), side(c, a));
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
        }
    }
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
}

/// Image `index` of the dataset drawn from `seed`; independent of how many
/// images the dataset holds.
pub fn synth_sample(seed: u64, index: u64, size: usize) -> (Image, Image) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let s = size as f64;

    // background: two muted colors blended by an oriented wave, plus grain
    let bg = [random_color(&mut rng, 60.0, 190.0), random_color(&mut rng, 60.0, 190.0)];
    let freq = rng.gen_range(2.0..6.0) * TAU / s;
    let dir = rng.gen_range(0.0..TAU);
    let phase = rng.gen_range(0.0..TAU);

    let (shapes, colors, mask) = loop {
        let count = rng.gen_range(1..=3);
        let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, s)).collect();
        let mut colors: Vec<[f64; 3]> = Vec::with_capacity(count);
        while colors.len() < count {
            let c = random_color(&mut rng, 0.0, 255.0);
            let far_bg = bg.iter().all(|&b| color_dist(c, b) > 110.0);
            let far_fg = colors.iter().all(|&o| color_dist(c, o) > 70.0);
            if far_bg && far_fg {
                colors.push(c);
            }
        }
        let mask: Vec<Option<usize>> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                (0..count).rev().find(|&k| shapes[k].contains(x, y))
            })
            .collect();
        let frac = mask.iter().filter(|m| m.is_some()).count() as f64 / (size * size) as f64;
        if (FG_RANGE.0..=FG_RANGE.1).contains(&frac) {
            break (shapes, colors, mask);
        }
    };
    debug_assert_eq!(shapes.len(), colors.len());

    let mut rgb = Vec::with_capacity(size * size * 3);
    for (i, owner) in mask.iter().enumerate() {
        let (x, y) = ((i % size) as f64, (i / size) as f64);
        let base = match owner {
            Some(k) => colors[*k],
            None => {
                let t = 0.5 + 0.5 * (freq * (x * dir.cos() + y * dir.sin()) + phase).sin();
                [0, 1, 2].map(|c| bg[0][c] + t * (bg[1][c] - bg[0][c]))
            }
        };
        for v in base {
            let grain = rng.gen_range(-12.0..12.0);
            rgb.push((v + grain).round().clamp(0.0, 255.0) as u8);
        }
    }
    let gt = mask.iter().map(|m| if m.is_some() { 255 } else { 0 }).collect();
    (
        Image::new(size, size, 3, rgb).expect("sizes agree"),
        Image::new(size, size, 1, gt).expect("sizes agree"),
    )
}

/// Writes `n` image/ground-truth pairs under `out_dir` and a
/// `manifest.tsv` listing them.
pub fn synth_dataset(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    if n == 0 || size == 0 {
        return Err(Error::InvalidArgument("synth needs at least one image of positive size".into()));
    }
    for sub in ["images", "gt"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let (img, gt) = synth_sample(seed, i as u64, size);
        let name = format!("img_{i:04}.png");
        let entry = Entry {
            image: out_dir.join("images").join(&name),
            gt: out_dir.join("gt").join(&name),
            mask: None,
        };
        write_image(&entry.image, &img)?;
        write_image(&entry.gt, &gt)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        name: format!("synth-{seed}"),
        size: Some(size),
        entries,
    };
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
