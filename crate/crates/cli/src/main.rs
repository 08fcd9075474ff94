//! Operator surface: train, analyze, prune, retrain, compare, verify.
//!
//! Data lands in files under `--out`; progress and diagnostics go to
//! stderr. Every command is deterministic given its inputs and seed.

mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use config::{parse_aggregate, parse_augment, DirLock, FileConfig, RunConfig};
use efaprune_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use efaprune_core::data::Dataset;
use efaprune_core::efa::analyze;
use efaprune_core::entropy::{analyze_entropy, WeightNorm, DEFAULT_BINS};
use efaprune_core::nn::{evaluate, model_stats, train_epochs, ModelSpec, OptimizerState};
use efaprune_core::prune::{apply_plan, build_plan};
use efaprune_core::report::{
    export_report, import_report, AnalysisDocument, ComparisonDocument, ModelRow,
};
use efaprune_core::singularity::{detect_singularities, DEFAULT_SINGULARITY_TOL};

#[derive(Parser)]
#[command(
    name = "efaprune",
    version,
    about = "Estimate CNN filter redundancy from gradient-matrix PCA and prune hierarchically"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct CommonOpts {
    /// TOML config file; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model preset: tiny-cnn, vgg-a, vgg-desk, resnet56-desk, or a path
    /// to an architecture file.
    #[arg(long)]
    model: Option<String>,
    /// Dataset source: synth-blobs, separable-2d, mnist-idx, cifar10.
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding mnist-idx or cifar10 files.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Sample count for synthetic datasets.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Augmentation: none or shift-mirror.
    #[arg(long)]
    augment: Option<String>,
    /// Global variance contribution rate in (0,1].
    #[arg(long)]
    variance_rate: Option<f64>,
    /// Relative Taylor-impact threshold for gradient masking.
    #[arg(long)]
    taylor_eps: Option<f64>,
    #[arg(long)]
    calibration_batches: Option<usize>,
    /// Snapshot aggregation: average or stack.
    #[arg(long)]
    aggregate: Option<String>,
    /// Fewest filters a surviving layer may keep.
    #[arg(long)]
    min_filters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints, plans and reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let file = FileConfig::load(self.config.as_deref())?;
        let pick = |flag: &Option<String>, file: &Option<String>, default: &str| {
            flag.clone()
                .or_else(|| file.clone())
                .unwrap_or_else(|| default.to_string())
        };
        Ok(RunConfig {
            model: pick(&self.model, &file.model, "tiny-cnn"),
            dataset: pick(&self.dataset, &file.dataset, "synth-blobs"),
            data_dir: self.data_dir.clone().or(file.data_dir),
            samples: self.samples.or(file.samples).unwrap_or(2000),
            epochs: self.epochs.or(file.epochs).unwrap_or(30),
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(128),
            lr: self.lr.or(file.lr).unwrap_or(0.1),
            momentum: self.momentum.or(file.momentum).unwrap_or(0.9),
            weight_decay: self.weight_decay.or(file.weight_decay).unwrap_or(5e-4),
            augment: parse_augment(&pick(&self.augment, &file.augment, "none"))?,
            variance_rate: self.variance_rate.or(file.variance_rate).unwrap_or(0.95),
            taylor_eps: self.taylor_eps.or(file.taylor_eps).unwrap_or(1e-6),
            calibration_batches: self
                .calibration_batches
                .or(file.calibration_batches)
                .unwrap_or(8),
            aggregate: parse_aggregate(&pick(&self.aggregate, &file.aggregate, "average"))?,
            min_filters: self.min_filters.or(file.min_filters).unwrap_or(5),
            seed: self.seed.or(file.seed).unwrap_or(42),
            out: self
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("efaprune-out")),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model preset from scratch and write a checkpoint.
    Train {
        #[command(flatten)]
        opts: CommonOpts,
    },
    /// Run effective filter analysis, entropy criteria and singularity
    /// diagnostics on a trained checkpoint.
    Analyze {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Build a pruning plan from an analysis document and emit the
    /// pruned architecture.
    Prune {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Analysis document (defaults to <out>/analysis.json).
        #[arg(long)]
        analysis: Option<PathBuf>,
    },
    /// Retrain a pruned architecture from scratch.
    Retrain {
        #[command(flatten)]
        opts: CommonOpts,
        /// Architecture file produced by `prune`.
        #[arg(long)]
        arch: PathBuf,
    },
    /// Compare a baseline and a pruned checkpoint on the test split.
    Compare {
        #[command(flatten)]
        opts: CommonOpts,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        pruned: PathBuf,
    },
    /// Run the embedded oracle suites and report pass/fail.
    Verify,
}

#[derive(Debug, Serialize, Deserialize)]
struct MetricsDocument {
    epoch_losses: Vec<f64>,
    epoch_accuracy: Vec<f64>,
    test_accuracy: f64,
}

fn main() -> Result<()> {
    setup_thread_pool()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Train { opts } => cmd_train(&opts.resolve()?),
        Command::Analyze { opts, checkpoint } => cmd_analyze(&opts.resolve()?, &checkpoint),
        Command::Prune {
            opts,
            checkpoint,
            analysis,
        } => cmd_prune(&opts.resolve()?, &checkpoint, analysis.as_deref()),
        Command::Retrain { opts, arch } => cmd_retrain(&opts.resolve()?, &arch),
        Command::Compare {
            opts,
            baseline,
            pruned,
        } => cmd_compare(&opts.resolve()?, &baseline, &pruned),
        Command::Verify => cmd_verify(),
    }
}

#[cfg(feature = "parallel")]
fn setup_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("EFAPRUNE_THREADS") {
        let n: usize = raw
            .parse()
            .with_context(|| format!("EFAPRUNE_THREADS must be a positive integer, got '{raw}'"))?;
        if n == 0 {
            bail!("EFAPRUNE_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("installing the worker thread pool")?;
    }
    Ok(())
}

#[cfg(not(feature = "parallel"))]
fn setup_thread_pool() -> Result<()> {
    Ok(())
}

fn train_and_save(
    config: &RunConfig,
    mut model: ModelSpec,
    train_data: &Dataset,
    test_data: &Dataset,
    ckpt_name: &str,
    metrics_name: &str,
) -> Result<()> {
    let _lock = DirLock::acquire(&config.out)?;
    let train_cfg = config.train_config();
    let mut state = OptimizerState::for_model(&model);
    eprintln!(
        "training {} for {} epochs on {} samples",
        config.model,
        train_cfg.epochs,
        train_data.len()
    );
    let log = train_epochs(&mut model, train_data, &train_cfg, &mut state, 0)?;
    for (e, (loss, acc)) in log
        .epoch_losses
        .iter()
        .zip(&log.epoch_accuracy)
        .enumerate()
    {
        eprintln!("epoch {e:>3}: loss {loss:.6}, top-1 {:.2}%", acc * 100.0);
    }
    let test_accuracy = evaluate(&model, test_data, train_cfg.batch_size)?;
    eprintln!("test top-1: {:.2}%", test_accuracy * 100.0);

    let ckpt = Checkpoint::from_model(
        &model,
        &state,
        train_cfg.epochs,
        log.epoch_losses.clone(),
        log.epoch_accuracy.clone(),
    );
    save_checkpoint(&config.out.join(ckpt_name), &ckpt)?;
    export_report(
        &MetricsDocument {
            epoch_losses: log.epoch_losses,
            epoch_accuracy: log.epoch_accuracy,
            test_accuracy,
        },
        &config.out.join(metrics_name),
    )?;
    eprintln!(
        "wrote {} and {}",
        config.out.join(ckpt_name).display(),
        config.out.join(metrics_name).display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let (train_data, test_data) = config.load_datasets()?;
    let model = config.build_model(&train_data)?;
    train_and_save(
        config,
        model,
        &train_data,
        &test_data,
        "checkpoint.ckpt",
        "metrics.json",
    )
}

fn cmd_analyze(config: &RunConfig, checkpoint: &std::path::Path) -> Result<()> {
    let _lock = DirLock::acquire(&config.out)?;
    let (train_data, _) = config.load_datasets()?;
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let calibration = train_data.calibration_split(0.1, config.seed)?;
    eprintln!(
        "analyzing {} with {} calibration samples at rate {}",
        checkpoint.display(),
        calibration.len(),
        config.variance_rate
    );
    let efa = analyze(&model, &calibration, config.batch_size, &config.efa_config())?;
    let entropy = analyze_entropy(&model, DEFAULT_BINS, WeightNorm::L2)?;
    let probe = calibration.images.clone();
    let singularity = detect_singularities(&model, &probe, DEFAULT_SINGULARITY_TOL)?;
    for layer in &efa.per_layer {
        eprintln!(
            "  layer {:>4}: {} dominant / {} channels{}",
            layer.layer_id,
            layer.dominant,
            layer.total_channels,
            if layer.degenerate { " (degenerate)" } else { "" }
        );
    }
    eprintln!("filter pruning ratio: {:.4}", efa.filter_pruning_ratio);
    let doc = AnalysisDocument {
        efa,
        entropy,
        singularity,
    };
    let path = config.out.join("analysis.json");
    export_report(&doc, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_prune(
    config: &RunConfig,
    checkpoint: &std::path::Path,
    analysis: Option<&std::path::Path>,
) -> Result<()> {
    let _lock = DirLock::acquire(&config.out)?;
    let default_analysis = config.out.join("analysis.json");
    let analysis_path = analysis.unwrap_or(&default_analysis);
    let doc: AnalysisDocument = import_report(analysis_path)
        .with_context(|| format!("loading analysis from {}", analysis_path.display()))?;
    let model = load_checkpoint(checkpoint)?.to_model()?;
    let (train_data, _) = config.load_datasets()?;
    let input_shape = train_data.image_shape();

    let plan = build_plan(&model, &doc.efa, &doc.entropy, config.min_filters)?;
    eprintln!(
        "plan keeps {} of {} filters; removed layers: {:?}",
        plan.kept_count(),
        model.prunable_convs().iter().map(|(_, c)| c).sum::<usize>(),
        plan.removed_layers
    );
    let plan_path = config.out.join("plan.json");
    export_report(&plan, &plan_path)?;
    if !plan.feasible {
        bail!(
            "pruning plan is infeasible: {}",
            plan.infeasible_reason.as_deref().unwrap_or("unknown")
        );
    }
    let pruned = apply_plan(&model, &plan, input_shape)?;
    let arch_path = config.out.join("pruned_arch.json");
    export_report(&pruned.descriptor(), &arch_path)?;
    eprintln!("wrote {} and {}", plan_path.display(), arch_path.display());
    Ok(())
}

fn cmd_retrain(config: &RunConfig, arch: &std::path::Path) -> Result<()> {
    let (train_data, test_data) = config.load_datasets()?;
    let desc = import_report(arch)
        .with_context(|| format!("loading architecture from {}", arch.display()))?;
    let model = ModelSpec::from_descriptor(&desc)?;
    train_and_save(
        config,
        model,
        &train_data,
        &test_data,
        "retrained.ckpt",
        "retrain_metrics.json",
    )
}

fn cmd_compare(
    config: &RunConfig,
    baseline: &std::path::Path,
    pruned: &std::path::Path,
) -> Result<()> {
    let _lock = DirLock::acquire(&config.out)?;
    let (_, test_data) = config.load_datasets()?;
    let input_shape = test_data.image_shape();

    let row = |path: &std::path::Path, label: &str| -> Result<ModelRow> {
        let model = load_checkpoint(path)?.to_model()?;
        let acc = evaluate(&model, &test_data, config.batch_size)?;
        let stats = model_stats(&model, input_shape)?;
        Ok(ModelRow {
            label: label.to_string(),
            top1_accuracy: acc,
            stats,
        })
    };
    let doc = ComparisonDocument::new(row(baseline, "baseline")?, row(pruned, "pruned")?);
    eprintln!(
        "baseline: top-1 {:.2}%, {} filters, {} params, {} FLOPs",
        doc.baseline.top1_accuracy * 100.0,
        doc.baseline.stats.filters,
        doc.baseline.stats.parameters,
        doc.baseline.stats.flops
    );
    eprintln!(
        "pruned:   top-1 {:.2}%, {} filters ({:.2}%), {} params ({:.2}%), {} FLOPs ({:.2}%)",
        doc.pruned.top1_accuracy * 100.0,
        doc.pruned.stats.filters,
        doc.filters_pruned_ratio * 100.0,
        doc.pruned.stats.parameters,
        doc.parameters_pruned_ratio * 100.0,
        doc.pruned.stats.flops,
        doc.flops_pruned_ratio * 100.0
    );
    let path = config.out.join("comparison.json");
    export_report(&doc, &path)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_verify() -> Result<()> {
    let results = efaprune_core::oracle::verification_suites()?;
    let mut failures = 0;
    for r in &results {
        if r.passed {
            println!("verify {}: pass ({})", r.name, r.detail);
        } else {
            println!("verify {}: FAIL ({})", r.name, r.detail);
            failures += 1;
        }
    }
    if failures > 0 {
        bail!("{failures} verification suite(s) failed");
    }
    Ok(())
}
