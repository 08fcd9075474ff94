//! SGD training with momentum, weight decay and milestone learning-rate
//! decay, plus frozen-model gradient capture for the analysis stages.
//!
//! Everything is a deterministic function of (seed, config, dataset): the
//! per-epoch shuffle and augmentation draws come from RNGs derived from
//! the seed and the epoch index alone, so training can resume from a
//! checkpoint and reproduce an uninterrupted run exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::backward::{backward, GradientSnapshot};
use super::forward::{forward, Aux, Phase};
use super::{is_trainable_key, LayerKind, ModelSpec, ParamMap, BN_MOMENTUM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    None,
    /// Random crop after zero padding plus horizontal mirroring.
    ShiftMirror,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub augmentation: Augmentation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            lr_initial: 0.1,
            lr_milestones: vec![],
            lr_decay: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            augmentation: Augmentation::None,
        }
    }
}

impl TrainConfig {
    /// Milestones at 50% and 75% of the epoch budget, mirroring a
    /// 160-epoch schedule with decay steps at 80 and 120.
    pub fn with_scaled_milestones(mut self) -> Self {
        self.lr_milestones = vec![self.epochs / 2, self.epochs * 3 / 4];
        self.lr_milestones.retain(|&m| m > 0 && m < self.epochs);
        self.lr_milestones.dedup();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if self.lr_initial < 0.0 || self.lr_decay <= 0.0 || self.momentum < 0.0 {
            return Err(Error::InvalidArgument("rates must be non-negative".into()));
        }
        let mut prev = None;
        for &m in &self.lr_milestones {
            if m >= self.epochs || prev.is_some_and(|p| m <= p) {
                return Err(Error::InvalidArgument(format!(
                    "milestones must be strictly increasing and below epochs, got {:?}",
                    self.lr_milestones
                )));
            }
            prev = Some(m);
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = self.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr_initial / self.lr_decay.powi(steps as i32)
    }
}

/// Momentum buffers, one per trainable parameter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub velocity: ParamMap,
}

impl OptimizerState {
    pub fn for_model(model: &ModelSpec) -> Self {
        let velocity = model
            .params
            .iter()
            .filter(|(k, _)| is_trainable_key(k))
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        OptimizerState { velocity }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Training top-1 accuracy per epoch (accumulated from the training
    /// forward passes themselves).
    pub epoch_accuracy: Vec<f64>,
}

/// Trains in place for `config.epochs` total epochs, starting at
/// `start_epoch` (used when resuming from a checkpoint).
///
/// On divergence the parameters are rolled back to the last finite epoch
/// boundary and `Error::Diverged` is returned; the caller keeps the
/// rolled-back model.
pub fn train_epochs(
    model: &mut ModelSpec,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut OptimizerState,
    start_epoch: usize,
) -> Result<TrainLog> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training dataset"));
    }
    let mut log = TrainLog::default();
    for epoch in start_epoch..config.epochs {
        let snapshot = (model.params.clone(), state.velocity.clone());
        match run_epoch(model, data, config, state, epoch) {
            Ok((loss, acc)) => {
                log.epoch_losses.push(loss);
                log.epoch_accuracy.push(acc);
            }
            Err(Error::Diverged { .. }) => {
                model.params = snapshot.0;
                state.velocity = snapshot.1;
                return Err(Error::Diverged { epoch });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

/// Fresh-state convenience wrapper around [`train_epochs`].
pub fn train(model: &mut ModelSpec, data: &Dataset, config: &TrainConfig) -> Result<TrainLog> {
    let mut state = OptimizerState::for_model(model);
    train_epochs(model, data, config, &mut state, 0)
}

fn run_epoch(
    model: &mut ModelSpec,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<(f64, f64)> {
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(model.seed, epoch, 0x5u64));
    let mut aug_rng = stream_rng(model.seed, epoch, 0xau64);
    let lr = config.lr_at(epoch);

    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    let mut correct = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let (batch, labels) = gather_batch(data, chunk, config.augmentation, &mut aug_rng);
        let pass = forward(model, &batch, Some(&labels), Phase::Train)?;
        let loss = pass.loss.expect("labels supplied");
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        loss_sum += loss;
        batches += 1;
        correct += pass
            .predictions()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();

        let snap = backward(model, &batch, &labels, &pass)?;
        apply_running_stats(model, &pass);
        sgd_step(model, state, &snap, lr, config);
    }
    Ok((loss_sum / batches as f64, correct as f64 / n as f64))
}

fn sgd_step(
    model: &mut ModelSpec,
    state: &mut OptimizerState,
    snap: &GradientSnapshot,
    lr: f64,
    config: &TrainConfig,
) {
    for (key, grad) in &snap.grads {
        let w = model.params.get_mut(key).expect("gradient key matches");
        let v = state.velocity.get_mut(key).expect("velocity key matches");
        for ((wv, vv), g) in w
            .data_mut()
            .iter_mut()
            .zip(v.data_mut())
            .zip(grad.data())
        {
            let total = g + config.weight_decay * *wv;
            *vv = config.momentum * *vv + total;
            *wv -= lr * *vv;
        }
    }
}

/// Folds the batch statistics recorded by a training forward pass into
/// the model's running mean/var buffers.
fn apply_running_stats(model: &mut ModelSpec, pass: &super::forward::ForwardPass) {
    fn walk(
        layers: &[super::LayerSpec],
        prefix: &str,
        records: &[super::forward::LayerRecord],
        params: &mut ParamMap,
    ) {
        for (i, spec) in layers.iter().enumerate() {
            let path = super::join_path(prefix, i);
            match &spec.kind {
                LayerKind::BatchNorm { .. } => {
                    if let Aux::BatchNorm {
                        batch_mean,
                        batch_var,
                        ..
                    } = &records[i].aux
                    {
                        let rm = params.get_mut(&format!("{path}.running_mean")).unwrap();
                        for (r, &b) in rm.data_mut().iter_mut().zip(batch_mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                        let rv = params.get_mut(&format!("{path}.running_var")).unwrap();
                        for (r, &b) in rv.data_mut().iter_mut().zip(batch_var) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                        }
                    }
                }
                LayerKind::ResidualBlock { members } => {
                    if let Aux::Block { inner, .. } = &records[i].aux {
                        walk(members, &path, inner, params);
                    }
                }
                _ => {}
            }
        }
    }
    let layers = model.layers.clone();
    walk(&layers, "", &pass.records, &mut model.params);
}

fn stream_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(salt.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn gather_batch(
    data: &Dataset,
    indices: &[usize],
    aug: Augmentation,
    rng: &mut ChaCha8Rng,
) -> (Tensor, Vec<usize>) {
    let (c, h, w) = data.image_shape();
    let per = c * h * w;
    let mut buf = Vec::with_capacity(indices.len() * per);
    let mut labels = Vec::with_capacity(indices.len());
    for &idx in indices {
        let img = &data.images.data()[idx * per..(idx + 1) * per];
        match aug {
            Augmentation::None => buf.extend_from_slice(img),
            Augmentation::ShiftMirror => {
                let pad = (h / 8).max(1);
                let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
                let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
                let flip = rng.random_bool(0.5);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let sx = if flip { w - 1 - x } else { x };
                            let (sy, sx) = (y as isize + dy, sx as isize + dx);
                            let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize
                            {
                                img[(ch * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                            buf.push(v);
                        }
                    }
                }
            }
        }
        labels.push(data.labels[idx] as usize);
    }
    let batch = Tensor::from_vec(&[indices.len(), c, h, w], buf).unwrap();
    (batch, labels)
}

/// Top-1 accuracy of the model on a dataset, evaluated with running
/// batch-norm statistics.
pub fn evaluate(model: &ModelSpec, data: &Dataset, batch_size: usize) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyInput("evaluation dataset"));
    }
    let indices: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size) {
        let (batch, labels) = gather_batch(data, chunk, Augmentation::None, &mut dummy);
        let pass = forward(model, &batch, None, Phase::Eval)?;
        correct += pass
            .predictions()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(correct as f64 / n as f64)
}

/// One frozen-parameter gradient snapshot per calibration mini-batch.
///
/// Batch statistics are used for normalization (matching the training
/// regime) but no parameter or running buffer is touched.
pub fn capture_gradient_matrices(
    model: &ModelSpec,
    calibration: &Dataset,
    batch_size: usize,
) -> Result<Vec<GradientSnapshot>> {
    if calibration.is_empty() {
        return Err(Error::EmptyInput("calibration dataset"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let indices: Vec<usize> = (0..calibration.len()).collect();
    let mut snapshots = Vec::new();
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    for (bi, chunk) in indices.chunks(batch_size).enumerate() {
        let (batch, labels) = gather_batch(calibration, chunk, Augmentation::None, &mut dummy);
        let pass = forward(model, &batch, Some(&labels), Phase::Calibrate)?;
        let mut snap = backward(model, &batch, &labels, &pass)?;
        snap.batch_index = bi;
        snapshots.push(snap);
    }
    Ok(snapshots)
}
