//! Effective filter analysis: how many filters a trained network can
//! lose.
//!
//! Per prunable conv layer, the unfolded weight-gradient matrix (rows =
//! kernel taps per input channel, columns = output filters) goes through
//! PCA after a first-order Taylor mask has zeroed entries whose impact on
//! the loss is noise-level. Directions needed to reach the variance
//! contribution rate are "dominant"; the pooled share of non-dominant
//! directions over all feature channels is the filter pruning ratio.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::pca_spectrum;
use crate::nn::{capture_gradient_matrices, GradientSnapshot, ModelSpec, ParamMap};
use crate::tensor::Tensor;

/// First-order estimate of a weight's impact on the loss if zeroed.
#[inline]
pub fn taylor_impact(w: f64, g: f64) -> f64 {
    (g * w).abs()
}

/// How unfolded matrices from multiple calibration batches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregate {
    /// Elementwise mean over snapshots (default).
    Average,
    /// Snapshots contribute extra observation rows.
    Stack,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EFAConfig {
    /// Global variance contribution rate in (0, 1].
    pub variance_contribution_rate: f64,
    /// Relative Taylor-impact threshold; entries strictly below
    /// `taylor_epsilon * max_layer_impact` are zeroed.
    pub taylor_epsilon: f64,
    /// Number of calibration mini-batches to draw snapshots from.
    pub calibration_batches: usize,
    /// Center observations before PCA.
    pub center: bool,
    pub aggregate: Aggregate,
}

impl Default for EFAConfig {
    fn default() -> Self {
        EFAConfig {
            variance_contribution_rate: 0.95,
            taylor_epsilon: 1e-6,
            calibration_batches: 8,
            center: true,
            aggregate: Aggregate::Average,
        }
    }
}

impl EFAConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.variance_contribution_rate;
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "variance contribution rate must lie in (0,1], got {r}"
            )));
        }
        if self.taylor_epsilon < 0.0 {
            return Err(Error::InvalidArgument(
                "taylor_epsilon must be non-negative".into(),
            ));
        }
        if self.calibration_batches == 0 {
            return Err(Error::InvalidArgument(
                "need at least one calibration batch".into(),
            ));
        }
        Ok(())
    }
}

/// Unfolded per-layer gradient matrix with its Taylor mask.
#[derive(Debug, Clone)]
pub struct GradientMatrix {
    pub layer_id: String,
    /// `(c_in * k * k) x c_out`; column j is filter j's flattened gradient.
    pub matrix: Tensor,
    /// True where the entry was Taylor-zeroed; such entries are exactly 0.
    pub mask: Vec<bool>,
}

/// Gradient snapshot after Taylor masking.
#[derive(Debug, Clone)]
pub struct MaskedGradients {
    pub grads: ParamMap,
    pub masks: BTreeMap<String, Vec<bool>>,
    pub loss: f64,
}

/// Zeroes every gradient entry whose Taylor impact falls strictly below
/// `epsilon` times the largest impact in the same parameter tensor.
pub fn mask_gradients(
    snapshot: &GradientSnapshot,
    model: &ModelSpec,
    epsilon: f64,
) -> Result<MaskedGradients> {
    let mut grads = ParamMap::new();
    let mut masks = BTreeMap::new();
    for (key, grad) in &snapshot.grads {
        let weights = model.params.get(key).ok_or_else(|| {
            Error::InvalidArgument(format!("snapshot key '{key}' not present in model"))
        })?;
        if weights.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                context: "mask_gradients",
                left: weights.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let max_impact = weights
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&w, &g)| taylor_impact(w, g))
            .fold(0.0f64, f64::max);
        let threshold = epsilon * max_impact;
        let mut masked = grad.clone();
        let mut mask = vec![false; grad.len()];
        for (i, (&w, g)) in weights
            .data()
            .iter()
            .zip(masked.data_mut().iter_mut())
            .enumerate()
        {
            if taylor_impact(w, *g) < threshold {
                *g = 0.0;
                mask[i] = true;
            }
        }
        grads.insert(key.clone(), masked);
        masks.insert(key.clone(), mask);
    }
    Ok(MaskedGradients {
        grads,
        masks,
        loss: snapshot.loss,
    })
}

/// Unfolds a rank-4 conv gradient into a `(c_in*k*k) x c_out` matrix;
/// row order is input-channel major, then kernel row major.
pub fn unfold_kernel_gradient(layer_id: &str, layer_grad: &Tensor) -> Result<GradientMatrix> {
    if layer_grad.rank() != 4 {
        return Err(Error::ShapeMismatch {
            context: "unfold_kernel_gradient",
            left: layer_grad.shape().to_vec(),
            right: vec![],
        });
    }
    let s = layer_grad.shape();
    let (co, ci, kh, kw) = (s[0], s[1], s[2], s[3]);
    let rows = ci * kh * kw;
    let mut m = Tensor::zeros(&[rows, co]);
    for j in 0..co {
        for r in 0..rows {
            m.set2(r, j, layer_grad.data()[j * rows + r]);
        }
    }
    Ok(GradientMatrix {
        layer_id: layer_id.to_string(),
        matrix: m,
        mask: vec![false; rows * co],
    })
}

/// Inverse of [`unfold_kernel_gradient`].
pub fn fold_kernel_gradient(gm: &GradientMatrix, shape: &[usize]) -> Result<Tensor> {
    let (co, ci, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let rows = ci * kh * kw;
    if gm.matrix.shape() != [rows, co] {
        return Err(Error::ShapeMismatch {
            context: "fold_kernel_gradient",
            left: gm.matrix.shape().to_vec(),
            right: shape.to_vec(),
        });
    }
    let mut out = Tensor::zeros(shape);
    for j in 0..co {
        for r in 0..rows {
            out.data_mut()[j * rows + r] = gm.matrix.at2(r, j);
        }
    }
    Ok(out)
}

/// Dominant/non-dominant eigenvector counts of one layer's gradient
/// matrix at variance contribution rate `r`.
///
/// Returns `(dominant, non_dominant, degenerate)`; a gradient matrix with
/// no variance at all counts every direction as non-dominant.
pub fn layer_redundancy(gm: &GradientMatrix, r: f64, center: bool) -> Result<(usize, usize, bool)> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "variance contribution rate must lie in (0,1], got {r}"
        )));
    }
    let c_out = gm.matrix.shape()[1];
    let spectrum = pca_spectrum(&gm.matrix, center)?;
    if spectrum.degenerate {
        return Ok((0, c_out, true));
    }
    let (dom, non) = dominant_from_ratios(&spectrum.explained_variance_ratio, r, c_out);
    Ok((dom, non, false))
}

pub(crate) fn dominant_from_ratios(ratios: &[f64], r: f64, c_out: usize) -> (usize, usize) {
    let mut cum = 0.0;
    let mut dominant = ratios.len();
    for (i, &ratio) in ratios.iter().enumerate() {
        cum += ratio;
        if cum >= r - 1e-10 {
            dominant = i + 1;
            break;
        }
    }
    (dominant, c_out.saturating_sub(dominant))
}

/// Pooled non-dominant share over all layers: each entry is
/// `(non_dominant, total_channels)`.
pub fn filter_pruning_ratio(per_layer: &[(usize, usize)]) -> Result<f64> {
    if per_layer.is_empty() {
        return Err(Error::EmptyInput("filter_pruning_ratio"));
    }
    let non_dominant: usize = per_layer.iter().map(|x| x.0).sum();
    let total: usize = per_layer.iter().map(|x| x.1).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("total channel count is zero".into()));
    }
    Ok(non_dominant as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRedundancy {
    pub layer_id: String,
    pub dominant: usize,
    pub non_dominant: usize,
    pub total_channels: usize,
    /// Descending explained-variance ratios of the layer spectrum.
    pub explained_variance: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EFAReport {
    pub variance_contribution_rate: f64,
    pub per_layer: Vec<LayerRedundancy>,
    pub filter_pruning_ratio: f64,
}

/// Full analysis pipeline: capture calibration gradients, Taylor-mask,
/// aggregate, unfold each prunable conv layer and count its dominant
/// directions.
pub fn analyze(
    model: &ModelSpec,
    calibration: &Dataset,
    batch_size: usize,
    config: &EFAConfig,
) -> Result<EFAReport> {
    config.validate()?;
    let snapshots = capture_gradient_matrices(model, calibration, batch_size)?;
    let masked: Vec<MaskedGradients> = snapshots
        .iter()
        .take(config.calibration_batches)
        .map(|s| mask_gradients(s, model, config.taylor_epsilon))
        .collect::<Result<_>>()?;
    analyze_snapshots(model, &masked, config)
}

/// Analysis over pre-masked snapshots (exposed so sensitivity studies can
/// reuse one capture across variance rates and aggregation modes).
pub fn analyze_snapshots(
    model: &ModelSpec,
    masked: &[MaskedGradients],
    config: &EFAConfig,
) -> Result<EFAReport> {
    if masked.is_empty() {
        return Err(Error::EmptyInput("gradient snapshots"));
    }
    let mut per_layer = Vec::new();
    let mut counts = Vec::new();
    for (layer_id, c_out) in model.prunable_convs() {
        let key = format!("{layer_id}.weight");
        let gm = aggregate_layer(&key, &layer_id, masked, config.aggregate)?;
        let spectrum = pca_spectrum(&gm.matrix, config.center)?;
        let (dominant, non_dominant, degenerate) = if spectrum.degenerate {
            (0, c_out, true)
        } else {
            let (d, n) = dominant_from_ratios(
                &spectrum.explained_variance_ratio,
                config.variance_contribution_rate,
                c_out,
            );
            (d, n, false)
        };
        counts.push((non_dominant, c_out));
        per_layer.push(LayerRedundancy {
            layer_id,
            dominant,
            non_dominant,
            total_channels: c_out,
            explained_variance: spectrum.explained_variance_ratio,
            degenerate,
        });
    }
    let ratio = filter_pruning_ratio(&counts)?;
    Ok(EFAReport {
        variance_contribution_rate: config.variance_contribution_rate,
        per_layer,
        filter_pruning_ratio: ratio,
    })
}

fn aggregate_layer(
    key: &str,
    layer_id: &str,
    masked: &[MaskedGradients],
    aggregate: Aggregate,
) -> Result<GradientMatrix> {
    let unfolded: Vec<GradientMatrix> = masked
        .iter()
        .map(|m| {
            let grad = m.grads.get(key).ok_or_else(|| {
                Error::InvalidArgument(format!("no gradient for '{key}' in snapshot"))
            })?;
            let mut gm = unfold_kernel_gradient(layer_id, grad)?;
            if let Some(mask) = m.masks.get(key) {
                // unfold the mask with the same row ordering
                let s = grad.shape();
                let (co, rows) = (s[0], s[1] * s[2] * s[3]);
                for j in 0..co {
                    for r in 0..rows {
                        gm.mask[r * co + j] = mask[j * rows + r];
                    }
                }
            }
            Ok(gm)
        })
        .collect::<Result<_>>()?;

    match aggregate {
        Aggregate::Average => {
            let shape = unfolded[0].matrix.shape().to_vec();
            let mut acc = Tensor::zeros(&shape);
            let mut mask = vec![true; acc.len()];
            for gm in &unfolded {
                for (a, &v) in acc.data_mut().iter_mut().zip(gm.matrix.data()) {
                    *a += v;
                }
                for (m, &b) in mask.iter_mut().zip(&gm.mask) {
                    *m &= b;
                }
            }
            let norm = 1.0 / unfolded.len() as f64;
            acc.data_mut().iter_mut().for_each(|x| *x *= norm);
            Ok(GradientMatrix {
                layer_id: layer_id.to_string(),
                matrix: acc,
                mask,
            })
        }
        Aggregate::Stack => {
            let cols = unfolded[0].matrix.shape()[1];
            let rows_each = unfolded[0].matrix.shape()[0];
            let mut data = Vec::with_capacity(unfolded.len() * rows_each * cols);
            let mut mask = Vec::with_capacity(unfolded.len() * rows_each * cols);
            for gm in &unfolded {
                data.extend_from_slice(gm.matrix.data());
                mask.extend_from_slice(&gm.mask);
            }
            Ok(GradientMatrix {
                layer_id: layer_id.to_string(),
                matrix: Tensor::from_vec(&[unfolded.len() * rows_each, cols], data)?,
                mask,
            })
        }
    }
}
