//! Training and evaluation steps shared by the commands.

use std::path::{Path, PathBuf};

use super::data::{predict_map, Item};
use super::image_io::{read_image, Image};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport, ImageResult};
use crate::losses::LossWeights;
use crate::network::Model;
use crate::pipeline::{train, LogRow, Sample, Sgd, TrainConfig};

/// Training log written next to a checkpoint: `x.ckpt` → `x.log.csv`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("log.csv")
}

/// File name of the saliency map written for an image stem.
pub fn map_name(stem: &str) -> String {
    format!("{stem}.png")
}

/// Trains `model` and returns the CSV log and every logged row.
pub fn train_logged(
    model: &mut Model<f32>,
    opt: &mut Sgd<f32>,
    samples: &[Sample<f32>],
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<(String, Vec<LogRow>)> {
    let mut csv = LogRow::csv_header(model.config().layers());
    csv.push('\n');
    let mut rows = Vec::with_capacity(cfg.max_iter);
    train(model, opt, samples, cfg, weights, |r| {
        csv.push_str(&r.to_csv());
        csv.push('\n');
        rows.push(r.clone());
        Ok(())
    })?;
    Ok((csv, rows))
}

/// The saliency map as stored on disk: 8-bit, at the original resolution.
pub fn stored_map(model: &Model<f32>, image: &Image, size: usize) -> Result<Image> {
    Image::from_map(&predict_map(model, image, size)?)
}

fn result_from_map(item: &Item, map: &Image) -> ImageResult {
    ImageResult {
        name: item.name.clone(),
        width: item.width(),
        height: item.height(),
        map: map.data.iter().map(|&v| v as f64 / 255.0).collect(),
        gt: item.gt.clone(),
    }
}

/// Metrics of live predictions, quantized exactly as stored maps are.
pub fn evaluate_model(model: &Model<f32>, items: &[Item], size: usize) -> Result<EvalReport> {
    let results = items
        .iter()
        .map(|it| Ok(result_from_map(it, &stored_map(model, &it.image, size)?)))
        .collect::<Result<Vec<_>>>()?;
    evaluate(&results)
}

/// Metrics of maps previously written to `dir` by `infer`.
pub fn evaluate_map_dir(dir: &Path, items: &[Item]) -> Result<EvalReport> {
    let results = items
        .iter()
        .map(|it| {
            let path = dir.join(map_name(&it.name));
            if !path.is_file() {
                return Err(Error::MissingPrediction(it.name.clone()));
            }
            let map = read_image(&path)?.to_gray();
            if (map.width, map.height) != (it.width(), it.height()) {
                return Err(Error::Image {
                    path,
                    msg: format!("map is {}×{}, ground truth {}×{}", map.width, map.height, it.width(), it.height()),
                });
            }
            Ok(result_from_map(it, &map))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(&results)
}

/// Training-set MAE of layer 1 in probability space (not quantized).
pub fn train_mae(model: &Model<f32>, items: &[Item], size: usize) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let p = predict_map(model, &it.image, size)?;
        let err: f64 = p
            .data()
            .iter()
            .zip(&it.gt)
            .map(|(&v, &g)| (v as f64 - if g { 1.0 } else { 0.0 }).abs())
            .sum();
        total += err / it.gt.len() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}
