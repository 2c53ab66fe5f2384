//! Command-line interface. Values layer as built-in defaults < config file
//! < flags; exit codes are 0 on success, 1 on runtime failure, 2 on usage
//! errors.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pdcvit_core::pdc::Variant;
use pdcvit_core::rng::component_seed;

use crate::bench::{self, BenchCase};
use crate::checkpoint::Checkpoint;
use crate::config::{layer, ConfigMap};
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval;
use crate::synth::{gen_synthetic, SynthSpec};
use crate::train::{self, TrainConfig, VitPreset};
use crate::verify::{self, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "pdcvit",
    version,
    about = "Pixel-difference-convolution vision transformer: train, evaluate, verify, benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic camera-fingerprint dataset
    GenSynth(GenSynthArgs),
    /// Train a classifier on a directory-per-class dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Train and compare the apdc, rpdc, and pdc variants
    Ablate(AblateArgs),
    /// Export class-token features of the test split to CSV
    ExportFeatures(ExportFeaturesArgs),
    /// Run the invariant verification suites
    Verify(VerifyArgs),
    /// Benchmark direct pair-wise PDC against its convolution rewrite
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct CommonArgs {
    /// Flat `key = value` config file; flags override its entries
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for decoding/evaluation; 0 means all cores
    #[arg(long)]
    pub threads: Option<usize>,
    /// Master seed; subsystem seeds derive from it
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonArgs {
    fn load_config(&self) -> Result<ConfigMap> {
        match &self.config {
            Some(path) => ConfigMap::load(path),
            None => Ok(ConfigMap::default()),
        }
    }
}

struct Common {
    out: PathBuf,
    seed: u64,
    /// True when the seed came from a flag or config file rather than the
    /// built-in default.
    seed_explicit: bool,
}

/// Applies the common layering and installs the rayon pool size.
fn resolve_common(args: &CommonArgs, cfg: &mut ConfigMap) -> Result<Common> {
    let out = layer(
        PathBuf::from("out"),
        cfg.take_str("out").map(PathBuf::from),
        args.out.clone(),
    );
    let cfg_seed = cfg.take_parse::<u64>("seed")?;
    let seed_explicit = args.seed.is_some() || cfg_seed.is_some();
    let seed = layer(7, cfg_seed, args.seed);
    let threads = layer(0, cfg.take_parse::<usize>("threads")?, args.threads);
    if threads > 0 {
        // Later calls with the same global pool silently keep the first size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(Common { out, seed, seed_explicit })
}

#[derive(Args)]
pub struct GenSynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of synthetic camera classes
    #[arg(long)]
    pub classes: Option<usize>,
    /// Images generated per class
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Square image size in pixels
    #[arg(long)]
    pub size: Option<usize>,
    /// Fingerprint amplitude in [0, 0.1]
    #[arg(long)]
    pub amp: Option<f64>,
}

#[derive(Args)]
pub struct DataArgs {
    /// Dataset root with one subdirectory per class
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Pre-built manifest file (overrides --data)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// PDC variant: pdc, apdc, or rpdc
    #[arg(long)]
    pub variant: Option<String>,
    /// Transformer preset: desk or full
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Channels per PDC branch
    #[arg(long)]
    pub branch_channels: Option<usize>,
    /// Center-crop size applied at load time (0 = use stored size)
    #[arg(long)]
    pub crop: Option<usize>,
    /// Fraction of the training split held out from optimization
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to evaluate
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub branch_channels: Option<usize>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Args)]
pub struct ExportFeaturesArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random draws for the equivalence suite
    #[arg(long)]
    pub trials: Option<usize>,
    /// Random draws for the gradient/law suites
    #[arg(long)]
    pub draws: Option<usize>,
    /// Test hook: perturb converted weights so the equivalence suite fails
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Comma-separated CxHxW grids, e.g. 3x32x32,3x64x64
    #[arg(long)]
    pub sizes: Option<String>,
    /// Timing repetitions per case (median reported)
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output channels of the benchmarked layer
    #[arg(long)]
    pub out_channels: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSynth(args) => cmd_gen_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::ExportFeatures(args) => cmd_export_features(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn cmd_gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut cfg = args.common.load_config()?;
    let common = resolve_common(&args.common, &mut cfg)?;
    let spec = SynthSpec {
        num_classes: layer(8, cfg.take_parse("classes")?, args.classes),
        images_per_class: layer(100, cfg.take_parse("per_class")?, args.per_class),
        image_size: layer(32, cfg.take_parse("size")?, args.size),
        amplitude: layer(0.05, cfg.take_parse("amp")?, args.amp),
        content_seed: component_seed(common.seed, "synth.content"),
        fingerprint_seed: component_seed(common.seed, "synth.fingerprint"),
    };
    cfg.ensure_consumed()?;
    fs::create_dir_all(&common.out)?;
    let mut manifest = gen_synthetic(&spec, &common.out)?;
    for warning in manifest.split(common.seed) {
        eprintln!("warning: {warning}");
    }
    let manifest_path = common.out.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    println!(
        "generated {} images in {} classes under {}",
        manifest.items.len(),
        manifest.num_classes(),
        common.out.display()
    );
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

/// Resolves --manifest/--data (+ seed) into a split manifest.
fn resolve_manifest(data: &DataArgs, cfg: &mut ConfigMap, seed: u64) -> Result<DatasetManifest> {
    let manifest_path = data
        .manifest
        .clone()
        .or_else(|| cfg.take_str("manifest").map(PathBuf::from));
    let data_path = data.data.clone().or_else(|| cfg.take_str("data").map(PathBuf::from));
    match (manifest_path, data_path) {
        (Some(path), _) => DatasetManifest::load(&path),
        (None, Some(root)) => {
            let mut manifest = DatasetManifest::scan(&root)?;
            for warning in manifest.split(seed) {
                eprintln!("warning: {warning}");
            }
            Ok(manifest)
        }
        (None, None) => Err(Error::Usage("provide --data <dir> or --manifest <file>".into())),
    }
}

struct TrainLayered {
    config: TrainConfig,
    manifest: DatasetManifest,
    out: PathBuf,
}

#[allow(clippy::too_many_arguments)]
fn layer_train(
    common: &CommonArgs,
    data: &DataArgs,
    variant: Option<&str>,
    preset: Option<&str>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    branch_channels: Option<usize>,
    crop: Option<usize>,
    val_fraction: Option<f64>,
) -> Result<TrainLayered> {
    let mut cfg = common.load_config()?;
    let resolved = resolve_common(common, &mut cfg)?;
    let defaults = TrainConfig::default();
    let variant_name = layer(
        defaults.variant.name().to_string(),
        cfg.take_str("variant"),
        variant.map(str::to_string),
    );
    let preset_name = layer(
        defaults.preset.name().to_string(),
        cfg.take_str("preset"),
        preset.map(str::to_string),
    );
    let config = TrainConfig {
        lr: layer(defaults.lr, cfg.take_parse("lr")?, lr),
        batch_size: layer(defaults.batch_size, cfg.take_parse("batch_size")?, batch_size),
        epochs: layer(defaults.epochs, cfg.take_parse("epochs")?, epochs),
        seed: resolved.seed,
        variant: Variant::parse(&variant_name)
            .ok_or_else(|| Error::Usage(format!("unknown variant '{variant_name}'")))?,
        preset: VitPreset::parse(&preset_name)
            .ok_or_else(|| Error::Usage(format!("unknown preset '{preset_name}'")))?,
        branch_channels: layer(
            defaults.branch_channels,
            cfg.take_parse("branch_channels")?,
            branch_channels,
        ),
        crop: layer(defaults.crop, cfg.take_parse("crop")?, crop),
        val_fraction: layer(defaults.val_fraction, cfg.take_parse("val_fraction")?, val_fraction),
        stop_at_test_accuracy: None,
    };
    let manifest = resolve_manifest(data, &mut cfg, config.seed)?;
    cfg.ensure_consumed()?;
    Ok(TrainLayered { config, manifest, out: resolved.out })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let TrainLayered { config, manifest, out } = layer_train(
        &args.common,
        &args.data,
        args.variant.as_deref(),
        args.preset.as_deref(),
        args.epochs,
        args.batch_size,
        args.lr,
        args.branch_channels,
        args.crop,
        args.val_fraction,
    )?;
    fs::create_dir_all(&out)?;
    manifest.save(&out.join("manifest.tsv"))?;
    let result = train::train(&manifest, &config, &out)?;
    for row in &result.history {
        println!(
            "epoch {:>3}  train_loss {:.6}  test_loss {:.6}  test_acc {:.4}",
            row.epoch, row.train_loss, row.test_loss, row.test_accuracy
        );
    }
    let mut report = eval::evaluate(&result.checkpoint, &manifest)?;
    report.loss_history = result.history.clone();
    fs::write(out.join("report.json"), report.to_json())?;
    fs::write(out.join("report.txt"), report.render_text())?;
    println!("{}", report.render_text());
    println!("checkpoints: {} / {}", result.best_path.display(), result.final_path.display());
    println!("history: {}", result.history_path.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.common.load_config()?;
    let common = resolve_common(&args.common, &mut cfg)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    // Reuse the training split seed unless the caller overrode it.
    let split_seed = if common.seed_explicit { common.seed } else { ckpt.train.seed };
    let manifest = resolve_manifest(&args.data, &mut cfg, split_seed)?;
    cfg.ensure_consumed()?;
    let report = eval::evaluate(&ckpt, &manifest)?;
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("report.json"), report.to_json())?;
    fs::write(common.out.join("report.txt"), report.render_text())?;
    println!("{}", report.render_text());
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let TrainLayered { config, manifest, out } = layer_train(
        &args.common,
        &args.data,
        None,
        args.preset.as_deref(),
        args.epochs,
        args.batch_size,
        args.lr,
        args.branch_channels,
        args.crop,
        args.val_fraction,
    )?;
    fs::create_dir_all(&out)?;
    manifest.save(&out.join("manifest.tsv"))?;
    let rows = eval::ablation_run(&manifest, &config, &out)?;
    let table = eval::ablation_table(&rows);
    fs::write(out.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_export_features(args: ExportFeaturesArgs) -> Result<()> {
    let mut cfg = args.common.load_config()?;
    let common = resolve_common(&args.common, &mut cfg)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let split_seed = if common.seed_explicit { common.seed } else { ckpt.train.seed };
    let manifest = resolve_manifest(&args.data, &mut cfg, split_seed)?;
    cfg.ensure_consumed()?;
    fs::create_dir_all(&common.out)?;
    let path = common.out.join("features.csv");
    eval::export_features(&ckpt, &manifest, &path)?;
    println!("features written to {}", path.display());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<()> {
    let mut cfg = args.common.load_config()?;
    let common = resolve_common(&args.common, &mut cfg)?;
    let defaults = VerifyOptions::default();
    let opts = VerifyOptions {
        trials: layer(defaults.trials, cfg.take_parse("trials")?, args.trials),
        draws: layer(defaults.draws, cfg.take_parse("draws")?, args.draws),
        seed: common.seed,
        inject_fault: args.inject_fault,
    };
    cfg.ensure_consumed()?;
    let results = verify::run_all(&opts)?;
    let mut failed = Vec::new();
    for suite in &results {
        println!(
            "[{}] {}: {}",
            if suite.passed { "PASS" } else { "FAIL" },
            suite.name,
            suite.detail
        );
        if !suite.passed {
            failed.push(suite.name);
        }
    }
    if failed.is_empty() {
        println!("all {} suites passed", results.len());
        Ok(())
    } else {
        Err(Error::Contract(format!("verification failed: {}", failed.join(", "))))
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut cfg = args.common.load_config()?;
    let common = resolve_common(&args.common, &mut cfg)?;
    let sizes_text = layer(
        "3x32x32,3x64x64,3x128x128".to_string(),
        cfg.take_str("sizes"),
        args.sizes,
    );
    let trials = layer(9, cfg.take_parse("trials")?, args.trials);
    let out_channels = layer(8, cfg.take_parse("out_channels")?, args.out_channels);
    cfg.ensure_consumed()?;
    let cases: Vec<BenchCase> = sizes_text
        .split(',')
        .map(|s| BenchCase::parse(s.trim()))
        .collect::<Result<_>>()?;
    let rows = bench::run(&cases, trials, out_channels, common.seed)?;
    let table = bench::render_table(&rows);
    print!("{table}");
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("bench.txt"), &table)?;
    Ok(())
}
