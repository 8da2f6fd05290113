//! `strokeseg`: phantom generation, splitting, preprocessing, training,
//! evaluation and prediction for DWI/ADC lesion segmentation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{RunConfig, RUN_CONFIG_FILE, RUN_MANIFEST_FILE};
use log::info;
use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use strokeseg::eval::{evaluate_split, format_table, predict_case, prediction_path, EvalOptions};
use strokeseg::nets::{load_checkpoint, ModelConfig, SegModel, Variant};
use strokeseg::phantom::write_dataset;
use strokeseg::preprocess::{load_split_samples, preprocess_ids, preprocess_split, split_dir, SampleRecord};
use strokeseg::train::{train_loop, AugmentConfig, BEST_CHECKPOINT};
use strokeseg::volume_io::{
    discover_cases, load_case, make_split, read_manifest, write_manifest, write_nifti_u8, Split,
    SplitManifest, SplitRatios,
};

#[derive(Parser, Debug)]
#[command(name = "strokeseg", version, about = "DWI/ADC stroke lesion segmentation")]
struct Cli {
    /// JSON config file layered over the defaults; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads for parallel case processing (default: all cores).
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    workers: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset of ellipsoid-lesion phantoms.
    Phantom(PhantomArgs),
    /// Partition the cases under a dataset root into train/val/test.
    Split(SplitArgs),
    /// Write per-slice training samples for every split.
    Preprocess(PreprocessArgs),
    /// Train a model; writes config, checkpoints and a metric log to the run directory.
    Train(TrainArgs),
    /// Score a checkpoint on one split and print the results table.
    Evaluate(EvaluateArgs),
    /// Write predicted masks (in the cropped grid) for a set of cases.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    n_cases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Volume shape as H,W,D.
    #[arg(long, value_parser = parse_shape)]
    shape: Option<[usize; 3]>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Train,val,test fractions.
    #[arg(long, value_parser = parse_ratios)]
    ratios: Option<SplitRatios>,
    /// Manifest path (default: <root>/split.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    /// Split manifest (default: <root>/split.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    signal_threshold: Option<f32>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    root: Option<PathBuf>,
    /// Split manifest; when absent, one is made from the cases under --root.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output of `preprocess`; when absent, samples are built in memory.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Run directory (default: runs/<UTC timestamp>).
    #[arg(long, env = "STROKESEG_RUN_DIR")]
    run_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long)]
    slices: Option<usize>,
    /// Use the small CPU-friendly model widths.
    #[arg(long)]
    tiny: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    freeze_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Seeds the split, the parameter init and the batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Checkpoint to score (default: <run-dir>/best.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Run directory holding config.json and manifest.json.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Report path (default: <run-dir>/eval_<split>.json).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each case's predicted mask here.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Comma-separated case ids (default: every case under --root).
    #[arg(long, value_delimiter = ',')]
    cases: Vec<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Errors that map to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three comma-separated sizes".to_string())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b, c] => Ok(SplitRatios::new(a, b, c)),
        _ => Err("expected three comma-separated fractions".into()),
    }
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "single" | "single_encoder" => Ok(Variant::SingleEncoder),
        "dual" | "dual_encoder" => Ok(Variant::DualEncoder),
        other => Err(format!("unknown variant {other:?} (expected single or dual)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::from(if e.is::<Usage>() { 1 } else { 2 })
        }
    }
}

/// The error chain on one line. Library errors already embed their source,
/// so a cause that just repeats the end of the previous message is dropped.
fn one_line(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let msg = cause.to_string().replace('\n', " ");
        if parts.last().is_some_and(|p| p.ends_with(&msg)) {
            continue;
        }
        parts.push(msg);
    }
    parts.join(": ")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()
            .context("configuring worker pool")?;
    }
    // Evaluation falls back to the run's own config when no file is given.
    let explicit = cli.config.as_deref().map(RunConfig::from_file).transpose()?;
    match cli.command {
        Command::Phantom(a) => phantom(explicit.unwrap_or_default(), a),
        Command::Split(a) => split(explicit.unwrap_or_default(), a),
        Command::Preprocess(a) => preprocess(explicit.unwrap_or_default(), a),
        Command::Train(a) => train(explicit.unwrap_or_default(), a),
        Command::Evaluate(a) => evaluate(explicit, a),
        Command::Predict(a) => predict(explicit, a),
    }
}

fn require_root(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.dataset_root.clone())
        .ok_or_else(|| usage("a dataset root is required (--root or dataset_root in --config)"))
}

fn default_manifest(root: &Path) -> PathBuf {
    root.join("split.json")
}

fn phantom(mut cfg: RunConfig, a: PhantomArgs) -> Result<()> {
    let spec = &mut cfg.phantom;
    if let Some(n) = a.n_cases {
        spec.n_cases = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(s) = a.shape {
        spec.shape = s;
    }
    let ids = write_dataset(spec, &a.out)?;
    println!("wrote {} phantom cases to {}", ids.len(), a.out.display());
    Ok(())
}

fn split(mut cfg: RunConfig, a: SplitArgs) -> Result<()> {
    let root = require_root(a.root, &cfg)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(r) = a.ratios {
        cfg.split = r;
    }
    let manifest = make_manifest(&root, &cfg)?;
    let out = a.out.unwrap_or_else(|| default_manifest(&root));
    write_manifest(&manifest, &out)?;
    println!(
        "train {} / val {} / test {} -> {}",
        manifest.train_ids.len(),
        manifest.val_ids.len(),
        manifest.test_ids.len(),
        out.display()
    );
    Ok(())
}

fn make_manifest(root: &Path, cfg: &RunConfig) -> Result<SplitManifest> {
    let ids = discover_cases(root)?;
    Ok(make_split(&ids, cfg.seed, cfg.split)?)
}

fn preprocess(mut cfg: RunConfig, a: PreprocessArgs) -> Result<()> {
    let root = require_root(a.root, &cfg)?;
    if let Some(s) = a.slices {
        cfg.preprocess.slices_per_modality = s;
    }
    if let Some(t) = a.signal_threshold {
        cfg.preprocess.signal_threshold = t;
    }
    let manifest_path = a.manifest.or(cfg.manifest.clone()).unwrap_or_else(|| default_manifest(&root));
    let manifest = read_manifest(&manifest_path)?;
    for split in Split::ALL {
        let n = preprocess_split(&root, &manifest, split, &cfg.preprocess, &a.out)?.len();
        println!("{}: {n} samples", split.as_str());
    }
    Ok(())
}

fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    let root = require_root(a.root, &cfg)?;
    cfg.dataset_root = Some(std::path::absolute(&root).with_context(|| format!("resolving {}", root.display()))?);
    if let Some(m) = a.manifest {
        cfg.manifest = Some(m);
    }
    if let Some(s) = a.samples {
        cfg.samples_dir = Some(s);
    }
    if a.tiny {
        let m = &cfg.model;
        cfg.model = ModelConfig {
            init_seed: m.init_seed,
            ..ModelConfig::tiny(m.variant, m.slices_per_modality)
        };
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(s) = a.slices {
        cfg.model.slices_per_modality = s;
    }
    cfg.sync_slices();
    let t = &mut cfg.train;
    if let Some(e) = a.epochs {
        t.epochs = e;
    }
    if let Some(b) = a.batch_size {
        t.batch_size = b;
    }
    if let Some(f) = a.freeze_epochs {
        t.freeze_epochs = f;
    }
    if let Some(lr) = a.lr {
        t.learning_rate = lr;
    }
    if a.no_augment {
        t.augment = AugmentConfig::disabled();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
        cfg.model.init_seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.preprocess.validate()?;

    let run_dir = a.run_dir.unwrap_or_else(|| {
        PathBuf::from("runs").join(chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string())
    });
    std::fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    cfg.write(&run_dir.join(RUN_CONFIG_FILE))?;

    let manifest = match &cfg.manifest {
        Some(p) => read_manifest(p)?,
        None => make_manifest(&root, &cfg)?,
    };
    write_manifest(&manifest, &run_dir.join(RUN_MANIFEST_FILE))?;
    info!("run directory {}", run_dir.display());

    let (train_set, val_set) = match &cfg.samples_dir {
        Some(dir) => (
            load_samples(dir, Split::Train, &cfg)?,
            load_samples(dir, Split::Val, &cfg)?,
        ),
        None => (
            preprocess_ids(&root, &manifest.train_ids, &cfg.preprocess)?,
            preprocess_ids(&root, &manifest.val_ids, &cfg.preprocess)?,
        ),
    };
    info!("{} training / {} validation samples", train_set.len(), val_set.len());

    let model = SegModel::new(&cfg.model)?;
    info!("{}: {} parameters", cfg.model.label(), model.param_count());
    let outcome = train_loop(&model, &train_set, &val_set, &cfg.train, Some(&run_dir), &mut ())?;
    println!(
        "best epoch {} (val loss {:.6}) -> {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        run_dir.join(BEST_CHECKPOINT).display()
    );
    Ok(())
}

fn load_samples(dir: &Path, split: Split, cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    let (index, records) = load_split_samples(&split_dir(dir, split))?;
    if index.slices_per_modality != cfg.model.slices_per_modality {
        bail!(
            "{}: samples have {} slices per modality, the model expects {}",
            dir.display(),
            index.slices_per_modality,
            cfg.model.slices_per_modality
        );
    }
    Ok(records)
}

/// A loaded checkpoint with the run context around it.
struct Loaded {
    model: SegModel,
    checkpoint: PathBuf,
    run_dir: Option<PathBuf>,
    cfg: RunConfig,
}

/// Loads the checkpoint first so a missing file is reported before anything
/// else is resolved. The run's `config.json` stands in for `--config`.
fn load_run(
    cli_cfg: Option<RunConfig>,
    checkpoint: Option<PathBuf>,
    run_dir: Option<PathBuf>,
) -> Result<Loaded> {
    let checkpoint = match (checkpoint, &run_dir) {
        (Some(c), _) => c,
        (None, Some(d)) => d.join(BEST_CHECKPOINT),
        (None, None) => return Err(usage("either --checkpoint or --run-dir is required")),
    };
    let (model, _) = load_checkpoint(&checkpoint)?;
    let run_dir = run_dir.or_else(|| {
        checkpoint
            .parent()
            .filter(|d| d.join(RUN_CONFIG_FILE).is_file())
            .map(Path::to_path_buf)
    });
    let mut cfg = match (cli_cfg, &run_dir) {
        (Some(c), _) => c,
        (None, Some(d)) if d.join(RUN_CONFIG_FILE).is_file() => RunConfig::from_file(&d.join(RUN_CONFIG_FILE))?,
        _ => RunConfig::default(),
    };
    cfg.model = model.config().clone();
    cfg.sync_slices();
    Ok(Loaded {
        model,
        checkpoint,
        run_dir,
        cfg,
    })
}

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn evaluate(cli_cfg: Option<RunConfig>, a: EvaluateArgs) -> Result<()> {
    let Loaded {
        model,
        checkpoint,
        run_dir,
        mut cfg,
    } = load_run(cli_cfg, a.checkpoint, a.run_dir)?;
    let root = require_root(a.root, &cfg)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    if let Some(s) = a.split {
        cfg.eval.split = s;
    }
    let manifest_path = a
        .manifest
        .or_else(|| run_dir.as_ref().map(|d| d.join(RUN_MANIFEST_FILE)).filter(|p| p.is_file()))
        .or(cfg.manifest.clone())
        .ok_or_else(|| usage("no split manifest: pass --manifest or --run-dir"))?;
    let manifest = read_manifest(&manifest_path)?;

    let split = cfg.eval.split;
    let fingerprint_source = json!({
        "model": cfg.model,
        "preprocess": cfg.preprocess,
        "threshold": cfg.eval.threshold,
        "split": split,
        "checkpoint_sha256": file_sha256(&checkpoint)?,
        "manifest": manifest,
    });
    let opts = EvalOptions {
        preprocess: &cfg.preprocess,
        threshold: cfg.eval.threshold,
        model_label: cfg.model.label(),
        fingerprint_source,
        prediction_dir: a.predictions.as_deref(),
    };
    let report = evaluate_split(&model, &manifest, split, &root, &opts)?;
    let out = match (a.out, &run_dir) {
        (Some(p), _) => p,
        (None, Some(d)) => d.join(format!("eval_{}.json", split.as_str())),
        (None, None) => PathBuf::from(format!("eval_{}.json", split.as_str())),
    };
    report.write(&out)?;
    for c in &report.per_case {
        info!("{}: dice {:.4}", c.case_id, c.dice);
    }
    print!("{}", format_table(std::slice::from_ref(&report)));
    info!("report written to {}", out.display());
    Ok(())
}

fn predict(cli_cfg: Option<RunConfig>, a: PredictArgs) -> Result<()> {
    let Loaded { model, mut cfg, .. } = load_run(cli_cfg, a.checkpoint, a.run_dir)?;
    let root = require_root(a.root, &cfg)?;
    if let Some(t) = a.threshold {
        cfg.eval.threshold = t;
    }
    let ids = if a.cases.is_empty() { discover_cases(&root)? } else { a.cases };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let entries = ids
        .par_iter()
        .map(|id| -> Result<serde_json::Value> {
            let case = load_case(&root, id)?;
            let p = predict_case(&model, &case, &cfg.preprocess, cfg.eval.threshold)?;
            let path = prediction_path(&a.out, id);
            write_nifti_u8(&path, &p.pred, p.spacing)?;
            let voxels: u64 = p.pred.iter().map(|&v| u64::from(v)).sum();
            Ok(json!({
                "case_id": id,
                "bbox": p.bbox,
                "lesion_voxels": voxels,
                "mask": path.file_name().map(|n| n.to_string_lossy().into_owned()),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let index = a.out.join("predictions.json");
    let mut text = serde_json::to_string_pretty(&json!({
        "threshold": cfg.eval.threshold,
        "model": cfg.model.label(),
        "cases": entries,
    }))?;
    text.push('\n');
    std::fs::write(&index, text).with_context(|| format!("writing {}", index.display()))?;
    println!("wrote {} predictions to {}", ids.len(), a.out.display());
    Ok(())
}
