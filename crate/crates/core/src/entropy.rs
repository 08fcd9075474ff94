//! Histogram entropy of filter weights and cross-entropy between adjacent
//! layers' weight distributions; the two selection criteria the pruner
//! ranks by.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerKind, LayerSpec, ModelSpec};
use crate::tensor::Tensor;

/// Default bin count for both criteria.
pub const DEFAULT_BINS: usize = 1000;
/// Smoothing added to the reference distribution before taking logs.
pub const CE_SMOOTHING: f64 = 1e-12;

/// Norm used to put both layers on a common scale before shared binning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightNorm {
    L1,
    L2,
    Max,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightHistogram {
    pub bin_count: usize,
    /// `bin_count + 1` ascending edges; the rightmost bin is right-closed.
    pub bin_edges: Vec<f64>,
    /// Bin probabilities summing to 1.
    pub probabilities: Vec<f64>,
}

/// Histogram of `weights` over `m` equal-width bins.
///
/// Without explicit `edges` the bins span `[min, max]` of the data; a
/// degenerate range (all weights equal) collapses into the single middle
/// bin holding probability 1.
pub fn weight_histogram(weights: &[f64], m: usize, edges: Option<&[f64]>) -> Result<WeightHistogram> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("weight_histogram"));
    }
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 bins, got {m}"
        )));
    }
    let bin_edges: Vec<f64> = match edges {
        Some(e) => {
            if e.len() != m + 1 || e.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(
                    "edges must be m+1 strictly ascending values".into(),
                ));
            }
            e.to_vec()
        }
        None => {
            let lo = weights.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                // weightless spread: park everything in the middle bin
                let mut probs = vec![0.0; m];
                probs[m / 2] = 1.0;
                let edges = (0..=m).map(|i| lo - 0.5 + i as f64 / m as f64).collect();
                return Ok(WeightHistogram {
                    bin_count: m,
                    bin_edges: edges,
                    probabilities: probs,
                });
            }
            let mut e: Vec<f64> = (0..=m)
                .map(|i| lo + (hi - lo) * i as f64 / m as f64)
                .collect();
            // the interpolation can round the end edges off the actual
            // extrema, which would silently drop boundary weights
            e[0] = lo;
            e[m] = hi;
            e
        }
    };

    let lo = bin_edges[0];
    let hi = bin_edges[m];
    let width = (hi - lo) / m as f64;
    let mut counts = vec![0usize; m];
    let mut total = 0usize;
    for &w in weights {
        if w < lo || w > hi {
            continue;
        }
        let mut bin = ((w - lo) / width) as usize;
        if bin >= m {
            bin = m - 1; // rightmost bin right-closed
        }
        counts[bin] += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::InvalidArgument(
            "no weights fall inside the shared edges".into(),
        ));
    }
    let probabilities = counts
        .iter()
        .map(|&c| c as f64 / total as f64)
        .collect();
    Ok(WeightHistogram {
        bin_count: m,
        bin_edges,
        probabilities,
    })
}

/// Shannon entropy in nats of a probability vector, with `0 ln 0 = 0`.
pub fn entropy_nats(probabilities: &[f64]) -> f64 {
    probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// Entropy of one filter's weight histogram over its own range.
pub fn filter_entropy(filter_weights: &[f64], m: usize) -> Result<f64> {
    let hist = weight_histogram(filter_weights, m, None)?;
    Ok(entropy_nats(&hist.probabilities))
}

fn normalize(weights: &[f64], norm: WeightNorm) -> Vec<f64> {
    let scale = match norm {
        WeightNorm::L1 => weights.iter().map(|w| w.abs()).sum::<f64>(),
        WeightNorm::L2 => weights.iter().map(|w| w * w).sum::<f64>().sqrt(),
        WeightNorm::Max => weights.iter().map(|w| w.abs()).fold(0.0, f64::max),
    };
    if scale == 0.0 {
        return weights.to_vec();
    }
    weights.iter().map(|w| w / scale).collect()
}

/// Cross-entropy `-sum p^L ln p^(L-1)` between two layers' weight
/// distributions over shared equal-width bins spanning the union range.
/// Both layers are normalized to unit norm first and the reference
/// distribution is smoothed so empty bins stay finite.
pub fn layer_cross_entropy_with_norm(
    layer_weights: &[f64],
    predecessor_weights: &[f64],
    m: usize,
    norm: WeightNorm,
) -> Result<f64> {
    if layer_weights.is_empty() || predecessor_weights.is_empty() {
        return Err(Error::EmptyInput("layer_cross_entropy"));
    }
    let a = normalize(layer_weights, norm);
    let b = normalize(predecessor_weights, norm);
    let lo = a
        .iter()
        .chain(&b)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = a
        .iter()
        .chain(&b)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let edges: Vec<f64> = if lo == hi {
        (0..=m).map(|i| lo - 0.5 + i as f64 / m as f64).collect()
    } else {
        let mut e: Vec<f64> = (0..=m)
            .map(|i| lo + (hi - lo) * i as f64 / m as f64)
            .collect();
        e[0] = lo;
        e[m] = hi;
        e
    };
    let ha = weight_histogram(&a, m, Some(&edges))?;
    let hb = weight_histogram(&b, m, Some(&edges))?;
    let ce = ha
        .probabilities
        .iter()
        .zip(&hb.probabilities)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| -p * (q + CE_SMOOTHING).ln())
        .sum();
    Ok(ce)
}

pub fn layer_cross_entropy(
    layer_weights: &[f64],
    predecessor_weights: &[f64],
    m: usize,
) -> Result<f64> {
    layer_cross_entropy_with_norm(layer_weights, predecessor_weights, m, WeightNorm::L2)
}

/// Shared-bin entropy of a layer against itself; the reference value the
/// Gibbs inequality compares cross-entropies to.
pub fn self_entropy(weights: &[f64], m: usize, norm: WeightNorm) -> Result<f64> {
    let a = normalize(weights, norm);
    let hist = weight_histogram(&a, m, None)?;
    Ok(entropy_nats(&hist.probabilities))
}

/// Per-filter entropies and per-adjacent-pair cross-entropies for every
/// prunable conv layer of a model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyReport {
    pub bin_count: usize,
    /// `(layer_id, filter_index, entropy)` in traversal order.
    pub filter_entropies: Vec<(String, usize, f64)>,
    /// `(layer_id, predecessor_id, cross_entropy)`; the first conv layer
    /// has no predecessor and carries no entry.
    pub layer_cross_entropies: Vec<(String, String, f64)>,
}

impl EntropyReport {
    pub fn entropy_of(&self, layer: &str, filter: usize) -> Option<f64> {
        self.filter_entropies
            .iter()
            .find(|(l, f, _)| l == layer && *f == filter)
            .map(|(_, _, h)| *h)
    }

    pub fn cross_entropy_of(&self, layer: &str) -> Option<f64> {
        self.layer_cross_entropies
            .iter()
            .find(|(l, _, _)| l == layer)
            .map(|(_, _, ce)| *ce)
    }
}

/// Computes the report over a model's prunable conv layers with the given
/// bin count and normalization.
pub fn analyze_entropy(model: &ModelSpec, m: usize, norm: WeightNorm) -> Result<EntropyReport> {
    let mut filter_entropies = Vec::new();
    let mut layer_cross_entropies = Vec::new();
    let convs = collect_conv_layers(model);
    let prunable = model.prunable_convs();

    for (layer_id, _c_out) in &prunable {
        let weights = &model.params[&format!("{layer_id}.weight")];
        let s = weights.shape();
        let per_filter = s[1] * s[2] * s[3];
        for f in 0..s[0] {
            let fw = &weights.data()[f * per_filter..(f + 1) * per_filter];
            filter_entropies.push((layer_id.clone(), f, filter_entropy(fw, m)?));
        }
        // predecessor = previous conv layer in traversal order
        if let Some(pos) = convs.iter().position(|c| c == layer_id) {
            if pos > 0 {
                let pred = &convs[pos - 1];
                let pw = &model.params[&format!("{pred}.weight")];
                let ce =
                    layer_cross_entropy_with_norm(weights.data(), pw.data(), m, norm)?;
                layer_cross_entropies.push((layer_id.clone(), pred.clone(), ce));
            }
        }
    }
    Ok(EntropyReport {
        bin_count: m,
        filter_entropies,
        layer_cross_entropies,
    })
}

/// Paths of all conv layers (prunable or not) in traversal order.
pub fn collect_conv_layers(model: &ModelSpec) -> Vec<String> {
    fn walk(layers: &[LayerSpec], prefix: &str, out: &mut Vec<String>) {
        for (i, spec) in layers.iter().enumerate() {
            let path = if prefix.is_empty() {
                i.to_string()
            } else {
                format!("{prefix}.{i}")
            };
            match &spec.kind {
                LayerKind::Conv(_) => out.push(path),
                LayerKind::ResidualBlock { members } => walk(members, &path, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    walk(&model.layers, "", &mut out);
    out
}

/// Convenience accessor: flat weight slice of one filter.
pub fn filter_weights(weights: &Tensor, filter: usize) -> &[f64] {
    let s = weights.shape();
    let per = s[1] * s[2] * s[3];
    &weights.data()[filter * per..(filter + 1) * per]
}
