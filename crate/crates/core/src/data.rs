//! Dataset ingestion: IDX containers, CIFAR-10 binary batches and seeded
//! synthetic generators. Loaders are pure functions of the file bytes.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Calibration,
}

/// Images in `[0,1]` with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Shape `(n, c, h, w)`.
    pub images: Tensor,
    pub labels: Vec<i64>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<i64>, class_count: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::ShapeMismatch {
                context: "Dataset::new",
                left: images.shape().to_vec(),
                right: vec![],
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::CountMismatch {
                images: images.shape()[0],
                labels: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("dataset"));
        }
        for &l in &labels {
            if l < 0 || l as usize >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: class_count,
                });
            }
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// New dataset holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Dataset::new(
            Tensor::from_vec(&[indices.len(), c, h, w], data)?,
            labels,
            self.class_count,
            split,
        )
    }

    /// Seeded sample without replacement; the default calibration split
    /// is 10% of the training set.
    pub fn calibration_split(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        let take = ((self.len() as f64 * fraction).round() as usize).clamp(1, self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xca11_b7a7_e5ee_d000));
        order.truncate(take);
        order.sort_unstable();
        self.subset(&order, Split::Calibration)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Truncated {
            needed: end,
            got: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Loads an MNIST-style IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;

    let magic = read_u32_be(&img_bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            found: magic,
            expected: IDX_IMAGE_MAGIC,
        });
    }
    let n = read_u32_be(&img_bytes, 4)? as usize;
    let h = read_u32_be(&img_bytes, 8)? as usize;
    let w = read_u32_be(&img_bytes, 12)? as usize;
    let need = 16 + n * h * w;
    if img_bytes.len() < need {
        return Err(Error::Truncated {
            needed: need,
            got: img_bytes.len(),
        });
    }

    let lmagic = read_u32_be(&lbl_bytes, 0)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic {
            offset: 0,
            found: lmagic,
            expected: IDX_LABEL_MAGIC,
        });
    }
    let ln = read_u32_be(&lbl_bytes, 4)? as usize;
    if lbl_bytes.len() < 8 + ln {
        return Err(Error::Truncated {
            needed: 8 + ln,
            got: lbl_bytes.len(),
        });
    }
    if ln != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: ln,
        });
    }

    let data: Vec<f64> = img_bytes[16..need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<i64> = lbl_bytes[8..8 + ln].iter().map(|&b| b as i64).collect();
    let class_count = labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1)
        .max(10);
    Dataset::new(
        Tensor::from_vec(&[n, 1, h, w], data)?,
        labels,
        class_count,
        Split::Train,
    )
}

/// Writes an IDX pair; the inverse of [`load_idx`], used to build
/// fixtures and desk-scale stand-in datasets.
pub fn write_idx(images_path: &Path, labels_path: &Path, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.image_shape();
    if c != 1 {
        return Err(Error::InvalidArgument(
            "IDX images are single-channel".into(),
        ));
    }
    let mut img = Vec::with_capacity(16 + data.len() * h * w);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(h as u32).to_be_bytes());
    img.extend_from_slice(&(w as u32).to_be_bytes());
    img.extend(
        data.images
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lbl = Vec::with_capacity(8 + data.len());
    lbl.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.len() as u32).to_be_bytes());
    lbl.extend(data.labels.iter().map(|&l| l as u8));
    fs::write(images_path, img)?;
    fs::write(labels_path, lbl)?;
    Ok(())
}

/// Loads CIFAR-10 binary batches from a directory: `data_batch_*.bin`
/// become the train split, `test_batch.bin` the test split. Partial
/// batch files are accepted as long as records align.
pub fn load_cifar10_binary(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<std::path::PathBuf> = match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        _ => {
            let mut v: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if v.is_empty() {
                v.push(dir.join("data_batch_1.bin"));
            }
            v
        }
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = fs::read(file)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::RecordMisaligned {
                size: bytes.len(),
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            let label = rec[0] as i64;
            if !(0..10).contains(&label) {
                return Err(Error::LabelOutOfRange { label, classes: 10 });
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("cifar10 directory"));
    }
    let n = labels.len();
    Dataset::new(
        Tensor::from_vec(&[n, 3, 32, 32], images)?,
        labels,
        10,
        split,
    )
}

/// Writes one CIFAR-10 binary batch file; the inverse of a single-file
/// [`load_cifar10_binary`] read.
pub fn write_cifar10_batch(path: &Path, data: &Dataset) -> Result<()> {
    let (c, h, w) = data.image_shape();
    if (c, h, w) != (3, 32, 32) {
        return Err(Error::InvalidArgument(
            "CIFAR-10 records are 3x32x32".into(),
        ));
    }
    let per = 3 * 32 * 32;
    let mut bytes = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for i in 0..data.len() {
        bytes.push(data.labels[i] as u8);
        bytes.extend(
            data.images.data()[i * per..(i + 1) * per]
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    GaussianBlobs,
    Separable2d,
}

/// Deterministic synthetic datasets.
///
/// `GaussianBlobs` draws 10-class single-channel 16x16 images around
/// class-specific blob patterns; `Separable2d` draws a linearly separable
/// 2-class set carried as 2-channel 1x1 images.
pub fn synth_dataset(kind: SynthKind, n: usize, seed: u64) -> Result<Dataset> {
    match kind {
        SynthKind::GaussianBlobs => gaussian_blobs(n, 10, 1, 16, 16, 0.35, seed),
        SynthKind::Separable2d => separable_2d(n, seed),
    }
}

/// Class-conditional blob images: each class lights a distinct pattern of
/// cells, plus Gaussian pixel noise of the given standard deviation.
pub fn gaussian_blobs(
    n: usize,
    classes: usize,
    channels: usize,
    h: usize,
    w: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();

    // per-class templates come from a side RNG so that n does not change
    // the class geometry
    let mut template_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e3b_11ad_u64);
    let per = channels * h * w;
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..per)
                .map(|_| {
                    if template_rng.random_bool(0.25) {
                        template_rng.random_range(0.6..1.0)
                    } else {
                        template_rng.random_range(0.0..0.15)
                    }
                })
                .collect()
        })
        .collect();

    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class as i64);
        for &t in &templates[class] {
            let v: f64 = t + normal.sample(&mut rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Dataset::new(
        Tensor::from_vec(&[n, channels, h, w], data)?,
        labels,
        classes,
        Split::Train,
    )
}

/// Two classes split by the fixed hyperplane `0.8x - 0.6y = 0.1` with a
/// margin, so a linear model can reach 100% accuracy by construction.
pub fn separable_2d(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (wx, wy, b, margin) = (0.8, -0.6, 0.1, 0.15);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let x = rng.random_range(-1.0..1.0);
        let y = rng.random_range(-1.0..1.0);
        let score: f64 = wx * x + wy * y - b;
        if score.abs() < margin {
            continue;
        }
        labels.push(if score > 0.0 { 1 } else { 0 });
        data.push(x);
        data.push(y);
    }
    Dataset::new(
        Tensor::from_vec(&[n, 2, 1, 1], data)?,
        labels,
        2,
        Split::Train,
    )
}
