//! Run configuration: defaults, optional TOML config file, command-line
//! flags. Flags override file fields, file fields override defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use efaprune_core::data::{
    gaussian_blobs, load_cifar10_binary, load_idx, separable_2d, Dataset, Split,
};
use efaprune_core::efa::{Aggregate, EFAConfig};
use efaprune_core::nn::{presets, Augmentation, ModelSpec, TrainConfig};
use efaprune_core::report::import_report;

/// Flat optional mirror of the tunable fields, as read from `--config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<String>,
    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub samples: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub augment: Option<String>,
    pub variance_rate: Option<f64>,
    pub taylor_eps: Option<f64>,
    pub calibration_batches: Option<usize>,
    pub aggregate: Option<String>,
    pub min_filters: Option<usize>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: String,
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: Augmentation,
    pub variance_rate: f64,
    pub taylor_eps: f64,
    pub calibration_batches: usize,
    pub aggregate: Aggregate,
    pub min_filters: usize,
    pub seed: u64,
    pub out: PathBuf,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr_initial: self.lr,
            lr_milestones: vec![],
            lr_decay: 10.0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            augmentation: self.augment,
        }
        .with_scaled_milestones()
    }

    pub fn efa_config(&self) -> EFAConfig {
        EFAConfig {
            variance_contribution_rate: self.variance_rate,
            taylor_epsilon: self.taylor_eps,
            calibration_batches: self.calibration_batches,
            center: true,
            aggregate: self.aggregate,
        }
    }

    /// Training and test splits for the configured dataset source.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset)> {
        let test_n = (self.samples / 5).max(2);
        match self.dataset.as_str() {
            "synth-blobs" => {
                // one draw, then split: train and test share the class
                // templates but never a noise sample
                let pool =
                    gaussian_blobs(self.samples + test_n, 10, 1, 16, 16, 0.35, self.seed)?;
                let train_idx: Vec<usize> = (0..self.samples).collect();
                let test_idx: Vec<usize> = (self.samples..self.samples + test_n).collect();
                Ok((
                    pool.subset(&train_idx, Split::Train)?,
                    pool.subset(&test_idx, Split::Test)?,
                ))
            }
            "separable-2d" => {
                let train = separable_2d(self.samples, self.seed)?;
                let test = separable_2d(test_n, self.seed ^ 0x7e57)?;
                Ok((train, test))
            }
            "mnist-idx" => {
                let dir = self
                    .data_dir
                    .as_deref()
                    .context("--data-dir is required for dataset 'mnist-idx'")?;
                let train = load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let test = load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                Ok((train, test))
            }
            "cifar10" => {
                let dir = self
                    .data_dir
                    .as_deref()
                    .context("--data-dir is required for dataset 'cifar10'")?;
                let train = load_cifar10_binary(dir, Split::Train)?;
                let test = load_cifar10_binary(dir, Split::Test)?;
                Ok((train, test))
            }
            other => bail!(
                "unknown dataset '{other}' (expected synth-blobs, separable-2d, mnist-idx or cifar10)"
            ),
        }
    }

    /// Builds the configured model preset for a dataset's shape.
    pub fn build_model(&self, data: &Dataset) -> Result<ModelSpec> {
        let (c, h, w) = data.image_shape();
        let classes = data.class_count;
        let model = match self.model.as_str() {
            "tiny-cnn" => presets::tiny_cnn(c, h, w, classes, self.seed)?,
            "vgg-a" => {
                require_cifar_shape("vgg-a", (c, h, w))?;
                presets::vgg_a(self.seed)?
            }
            "vgg-desk" => {
                require_cifar_shape("vgg-desk", (c, h, w))?;
                presets::vgg_with_channels(
                    &[8, 8, 16, 16, 32, 32, 32, 48, 48, 48, 48, 48, 48],
                    3,
                    classes,
                    self.seed,
                )?
            }
            "resnet56-desk" => {
                require_cifar_shape("resnet56-desk", (c, h, w))?;
                presets::resnet_cifar(2, self.seed)?
            }
            other => {
                let path = Path::new(other);
                if !path.exists() {
                    bail!(
                        "unknown model '{other}' (expected tiny-cnn, vgg-a, vgg-desk, \
                         resnet56-desk or a path to an architecture file)"
                    );
                }
                let desc = import_report(path)?;
                ModelSpec::from_descriptor(&desc)?
            }
        };
        Ok(model)
    }
}

fn require_cifar_shape(name: &str, shape: (usize, usize, usize)) -> Result<()> {
    if shape != (3, 32, 32) {
        bail!("model '{name}' expects 3x32x32 inputs, dataset provides {shape:?}");
    }
    Ok(())
}

pub fn parse_augment(s: &str) -> Result<Augmentation> {
    match s {
        "none" => Ok(Augmentation::None),
        "shift-mirror" => Ok(Augmentation::ShiftMirror),
        other => bail!("unknown augmentation '{other}' (expected none or shift-mirror)"),
    }
}

pub fn parse_aggregate(s: &str) -> Result<Aggregate> {
    match s {
        "average" => Ok(Aggregate::Average),
        "stack" => Ok(Aggregate::Stack),
        other => bail!("unknown aggregation '{other}' (expected average or stack)"),
    }
}

/// Guards an output directory against concurrent runs; the lock file is
/// removed when the guard drops.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(out: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(out)?;
        let path = out.join(".efaprune.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    out.display(),
                    path.display()
                )
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
