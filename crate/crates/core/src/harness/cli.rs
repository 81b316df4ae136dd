//! The `ognet` command line.

use std::collections::HashSet;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use super::ablation::{run_ablation, variants};
use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::data::{load_item, load_items, network_input, to_sample, Item};
use super::image_io::{read_image, write_image, write_mask};
use super::manifest::{load_manifest, Entry, Manifest};
use super::outputs::Outputs;
use super::run::{evaluate_map_dir, evaluate_model, log_path, map_name, stored_map, train_logged};
use super::synth::synth_dataset;
use crate::attention::AttentionKind;
use crate::error::Error;
use crate::network::{Model, NetworkConfig, CONV_E_SIZES};
use crate::pipeline::{generate_difference_maps, Sample, Sgd, Stage, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ognet", version, about = "Salient-object detection with output-guided attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train the rough model with cross-entropy only.
    TrainStage1(TrainArgs),
    /// Write difference masks and a manifest that references them.
    GenDiffmaps(DiffmapArgs),
    /// Train a fresh model with the full objective on a masked manifest.
    TrainStage2(TrainArgs),
    /// Write 8-bit saliency maps.
    Infer(InferArgs),
    /// Write per-image metrics and precision/recall curves.
    Eval(EvalArgs),
    /// Train one model per architecture variant and compare them.
    Ablate(AblateArgs),
}

fn conv_e_size(s: &str) -> Result<usize, String> {
    s.parse()
        .ok()
        .filter(|k| CONV_E_SIZES.contains(k))
        .ok_or_else(|| format!("expected one of 1, 3, 5, 7, got {s:?}"))
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint to write; the training log goes next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, value_parser = clap::value_parser!(AttentionKind))]
    pub attention: Option<AttentionKind>,
    #[arg(long, value_parser = conv_e_size)]
    pub conv_e_size: Option<usize>,
}

/// Flags shared by the training commands.
#[derive(Debug, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub no_residual: bool,
}

#[derive(Debug, Args)]
pub struct DiffmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `masks/` and the new `manifest.tsv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, required_unless_present = "image")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required_unless_present = "maps", conflicts_with = "maps")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of maps written by `infer`.
    #[arg(long)]
    pub maps: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(AttentionKind))]
    pub attention: Vec<AttentionKind>,
    #[arg(long, value_delimiter = ',', value_parser = conv_e_size)]
    pub conv_e_size: Vec<usize>,
    /// Additional datasets to evaluate every variant on.
    #[arg(long)]
    pub eval_manifest: Vec<PathBuf>,
}

/// Runs one parsed command and returns a one-line summary.
pub fn run(cli: Cli) -> anyhow::Result<String> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainStage1(a) => train_stage(a, Stage::One),
        Command::GenDiffmaps(a) => gen_diffmaps(a),
        Command::TrainStage2(a) => train_stage(a, Stage::Two),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    }
}

/// Joins an error chain into a single line.
pub fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], " ")
}

fn synth(a: SynthArgs) -> anyhow::Result<String> {
    let mut out = Outputs::new();
    out.dir(&a.out)?;
    let m = synth_dataset(a.count, a.size, a.seed, &a.out)?;
    for e in &m.entries {
        out.file(&e.image)?;
        out.file(&e.gt)?;
    }
    out.file(&a.out.join("manifest.tsv"))?;
    out.commit();
    Ok(format!("wrote {} images to {}", m.entries.len(), a.out.display()))
}

struct Resolved {
    run: RunConfig,
    network: NetworkConfig,
    train: TrainConfig,
    size: usize,
}

fn resolve(flags: &RunFlags, manifest_size: Option<usize>) -> anyhow::Result<Resolved> {
    let run = RunConfig::load(flags.config.as_deref())?;
    let mut network = run.network()?;
    if flags.no_residual {
        network.residual = false;
    }
    let mut train = run.train.clone();
    if let Some(seed) = flags.seed {
        train.seed = seed;
    }
    let size = run.resolve_size(flags.size, manifest_size)?;
    Ok(Resolved {
        run,
        network,
        train,
        size,
    })
}

fn samples(items: &[Item], size: usize) -> anyhow::Result<Vec<Sample<f32>>> {
    Ok(items.iter().map(|it| to_sample(it, size)).collect::<Result<_, _>>()?)
}

fn train_stage(a: TrainArgs, stage: Stage) -> anyhow::Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let mut r = resolve(&a.run, manifest.size)?;
    if let Some(k) = a.attention {
        r.network.attention = k;
    }
    if let Some(k) = a.conv_e_size {
        r.network.conv_e_size = k;
    }
    r.network.validate()?;
    r.train.stage = stage;
    r.train.max_iter = a.run.iters.unwrap_or(match stage {
        Stage::One => r.run.stage1_iters(),
        Stage::Two => r.train.max_iter,
    });
    r.train.validate()?;
    if stage == Stage::Two && r.run.loss.beta_w > 0.0 {
        if let Some(e) = manifest.entries.iter().find(|e| e.mask.is_none()) {
            return Err(Error::MissingMask(e.stem()).into());
        }
    }
    let items = load_items(&manifest)?;
    let data = samples(&items, r.size)?;

    let mut model = Model::<f32>::build(&r.network, r.train.seed)?;
    let mut opt = Sgd::new(&model.params);
    let (log, rows) = train_logged(&mut model, &mut opt, &data, &r.train, &r.run.loss)?;

    let mut out = Outputs::new();
    let ckpt = Checkpoint {
        model,
        seed: r.train.seed,
        stage,
        optimizer: Some(opt),
    };
    out.file(&a.out)?;
    save_checkpoint(&a.out, &ckpt)?;
    out.write(&log_path(&a.out), log)?;
    out.commit();
    let last = rows.last().map_or(f64::NAN, |r| r.total);
    Ok(format!(
        "trained {} iterations on {} images, final loss {last:.6}; wrote {}",
        rows.len(),
        data.len(),
        a.out.display()
    ))
}

fn unique_stems<'a>(names: impl Iterator<Item = &'a str>) -> anyhow::Result<()> {
    let mut seen = HashSet::new();
    for n in names {
        if !seen.insert(n.to_string()) {
            bail!("two inputs share the file stem {n:?}");
        }
    }
    Ok(())
}

fn gen_diffmaps(a: DiffmapArgs) -> anyhow::Result<String> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    let manifest = load_manifest(&a.manifest)?;
    let size = RunConfig::default().resolve_size(a.size, manifest.size)?;
    let items = load_items(&manifest)?;
    unique_stems(items.iter().map(|i| i.name.as_str()))?;

    let inputs: Vec<_> = items
        .iter()
        .map(|it| Ok((network_input::<f32>(&it.image, size)?, (it.height(), it.width()))))
        .collect::<Result<Vec<_>, Error>>()?;
    let refs: Vec<_> = inputs.iter().map(|(t, hw)| (t, *hw)).collect();
    let masks = generate_difference_maps(&ckpt.model, &refs)?;

    let mut out = Outputs::new();
    let mask_dir = a.out.join("masks");
    out.dir(&mask_dir)?;
    let mut entries = Vec::with_capacity(items.len());
    let mut nonempty = 0;
    for ((entry, item), mask) in manifest.entries.iter().zip(&items).zip(&masks) {
        let path = out.file(&mask_dir.join(map_name(&item.name)))?;
        write_mask(&path, mask, item.width(), item.height())?;
        nonempty += usize::from(mask.contains(&true));
        entries.push(Entry {
            mask: Some(path),
            ..entry.clone()
        });
    }
    let masked = Manifest {
        entries,
        ..manifest
    };
    let mpath = out.file(&a.out.join("manifest.tsv"))?;
    masked.save(&mpath)?;
    out.commit();
    Ok(format!(
        "wrote {} masks ({nonempty} non-empty) and {}",
        masks.len(),
        mpath.display()
    ))
}

fn infer(a: InferArgs) -> anyhow::Result<String> {
    let ckpt = load_checkpoint(&a.checkpoint).with_context(|| a.checkpoint.display().to_string())?;
    let mut inputs: Vec<(String, PathBuf)> = Vec::new();
    let mut manifest_size = None;
    if let Some(p) = &a.manifest {
        let m = load_manifest(p)?;
        manifest_size = m.size;
        inputs.extend(m.entries.iter().map(|e| (e.stem(), e.image.clone())));
    }
    for p in &a.image {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push((stem, p.clone()));
    }
    unique_stems(inputs.iter().map(|(s, _)| s.as_str()))?;
    let size = RunConfig::default().resolve_size(a.size, manifest_size)?;

    let mut out = Outputs::new();
    out.dir(&a.out)?;
    for (stem, path) in &inputs {
        let image = read_image(path)?;
        let map = stored_map(&ckpt.model, &image, size)?;
        let dest = out.file(&a.out.join(map_name(stem)))?;
        write_image(&dest, &map)?;
    }
    out.commit();
    Ok(format!("wrote {} maps to {}", inputs.len(), a.out.display()))
}

fn eval(a: EvalArgs) -> anyhow::Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let items = load_items(&manifest)?;
    let report = match (&a.checkpoint, &a.maps) {
        (Some(c), _) => {
            let ckpt = load_checkpoint(c).with_context(|| c.display().to_string())?;
            let size = RunConfig::default().resolve_size(a.size, manifest.size)?;
            evaluate_model(&ckpt.model, &items, size)?
        }
        (None, Some(dir)) => evaluate_map_dir(dir, &items)?,
        (None, None) => bail!("eval needs --checkpoint or --maps"),
    };
    let mut out = Outputs::new();
    out.write(&a.out.join("eval.csv"), report.eval_csv())?;
    out.write(&a.out.join("curves.csv"), report.curves_csv())?;
    out.commit();
    Ok(format!(
        "{} images: mae {:.4}, f {:.4}, s {:.4}",
        report.images.len(),
        report.mean_mae,
        report.mean_f,
        report.mean_s
    ))
}

fn ablate(a: AblateArgs) -> anyhow::Result<String> {
    let manifest = load_manifest(&a.manifest)?;
    let mut r = resolve(&a.run, manifest.size)?;
    r.train.max_iter = a.run.iters.unwrap_or(r.train.max_iter);
    // the full objective when every image has a mask, otherwise side losses only
    let masked = manifest.entries.iter().all(|e| e.mask.is_some());
    r.train.stage = if masked { Stage::Two } else { Stage::One };
    r.train.validate()?;
    let kinds = if a.attention.is_empty() {
        vec![r.network.attention]
    } else {
        a.attention.clone()
    };
    let sizes = if a.conv_e_size.is_empty() {
        vec![r.network.conv_e_size]
    } else {
        a.conv_e_size.clone()
    };
    let vs = variants(&r.network, &kinds, &sizes);
    unique_stems(vs.iter().map(|v| v.label.as_str()))?;

    let items = load_items(&manifest)?;
    let data = samples(&items, r.size)?;
    let mut datasets = vec![(manifest.name.clone(), items)];
    for p in &a.eval_manifest {
        let m = load_manifest(p)?;
        datasets.push((m.name.clone(), m.entries.iter().map(load_item).collect::<Result<_, _>>()?));
    }
    let result = run_ablation(&vs, &data, &datasets, &r.train, &r.run.loss, r.size)?;

    let mut out = Outputs::new();
    out.write(&a.out.join("ablation.csv"), result.ablation_csv())?;
    out.write(&a.out.join("losses.csv"), result.losses_csv())?;
    for (label, csv) in &result.logs {
        out.write(&a.out.join("logs").join(format!("{label}.csv")), csv)?;
    }
    out.commit();
    Ok(format!(
        "trained {} variants for {} iterations each; wrote {}",
        vs.len(),
        r.train.max_iter,
        a.out.join("ablation.csv").display()
    ))
}
