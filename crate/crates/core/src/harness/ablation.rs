//! Trains one model per architecture variant and tabulates the results.

use super::data::Item;
use super::run::{evaluate_model, train_logged};
use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::{Model, NetworkConfig};
use crate::pipeline::{Sample, Sgd, TrainConfig};

/// Trailing iterations averaged into the reported window mean.
pub const LOSS_WINDOW: usize = 100;

#[derive(Clone, Debug)]
pub struct Variant {
    pub label: String,
    pub config: NetworkConfig,
}

/// Cross product of attention kinds and `conv_e` sizes over `base`. Labels
/// name only the axes that vary.
pub fn variants(base: &NetworkConfig, kinds: &[AttentionKind], sizes: &[usize]) -> Vec<Variant> {
    let mut out = Vec::with_capacity(kinds.len() * sizes.len());
    for &attention in kinds {
        for &conv_e_size in sizes {
            let label = match (kinds.len() > 1, sizes.len() > 1) {
                (_, false) => attention.to_string(),
                (false, true) => format!("conv_e{conv_e_size}"),
                (true, true) => format!("{attention}-conv_e{conv_e_size}"),
            };
            out.push(Variant {
                label,
                config: NetworkConfig {
                    attention,
                    conv_e_size,
                    ..base.clone()
                },
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub dataset: String,
    pub mae: f64,
    pub f: f64,
    pub s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSummary {
    pub variant: String,
    pub iters: usize,
    /// Total loss of the last iteration.
    pub last: f64,
    /// Mean total loss over the last [`LOSS_WINDOW`] iterations.
    pub window_mean: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    pub losses: Vec<LossSummary>,
    /// `(variant, training log CSV)`.
    pub logs: Vec<(String, String)>,
}

/// Trains every variant from the same seed on `samples` and evaluates it on
/// each named dataset.
pub fn run_ablation(
    variants: &[Variant],
    samples: &[Sample<f32>],
    datasets: &[(String, Vec<Item>)],
    cfg: &TrainConfig,
    weights: &LossWeights,
    size: usize,
) -> Result<Ablation> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no ablation variants requested".into()));
    }
    let mut out = Ablation::default();
    for v in variants {
        let mut model = Model::<f32>::build(&v.config, cfg.seed)?;
        let mut opt = Sgd::new(&model.params);
        let (csv, rows) = train_logged(&mut model, &mut opt, samples, cfg, weights)?;
        let tail = &rows[rows.len().saturating_sub(LOSS_WINDOW)..];
        out.losses.push(LossSummary {
            variant: v.label.clone(),
            iters: rows.len(),
            last: rows.last().map_or(f64::NAN, |r| r.total),
            window_mean: tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64,
        });
        out.logs.push((v.label.clone(), csv));
        for (name, items) in datasets {
            let report = evaluate_model(&model, items, size)?;
            out.rows.push(AblationRow {
                variant: v.label.clone(),
                dataset: name.clone(),
                mae: report.mean_mae,
                f: report.mean_f,
                s: report.mean_s,
            });
        }
    }
    Ok(out)
}

impl Ablation {
    pub fn ablation_csv(&self) -> String {
        let mut out = String::from("variant,dataset,mae,f,s\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.variant, r.dataset, r.mae, r.f, r.s));
        }
        out
    }

    pub fn losses_csv(&self) -> String {
        let mut out = String::from("variant,iters,last,window_mean\n");
        for l in &self.losses {
            out.push_str(&format!("{},{},{},{}\n", l.variant, l.iters, l.last, l.window_mean));
        }
        out
    }
}
