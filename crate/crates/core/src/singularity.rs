//! Diagnostics for the three Hessian-degenerating singularity patterns:
//! dead units (elimination), duplicate units (overlap) and linearly
//! dependent units. Informational only; the pruning decision never reads
//! this report.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::{pca_spectrum, EIGENVALUE_CLAMP};
use crate::nn::{forward, LayerKind, ModelSpec, Phase};
use crate::tensor::Tensor;

pub const DEFAULT_SINGULARITY_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingularityReport {
    /// Filters whose incoming weight norm is below `tol` times the layer
    /// mean norm.
    pub elimination: Vec<(String, usize)>,
    /// Filter pairs with cosine similarity above `1 - tol`.
    pub overlap: Vec<(String, usize, usize)>,
    /// Numerical rank deficit of each conv layer's output map on the
    /// probe batch.
    pub linearity: Vec<(String, usize)>,
}

pub fn detect_singularities(
    model: &ModelSpec,
    batch: &Tensor,
    tol: f64,
) -> Result<SingularityReport> {
    let mut elimination = Vec::new();
    let mut overlap = Vec::new();

    let convs = crate::entropy::collect_conv_layers(model);
    for layer_id in &convs {
        let weights = &model.params[&format!("{layer_id}.weight")];
        let s = weights.shape();
        let (co, per) = (s[0], s[1] * s[2] * s[3]);
        let norms: Vec<f64> = (0..co)
            .map(|f| {
                weights.data()[f * per..(f + 1) * per]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        let mean_norm = norms.iter().sum::<f64>() / co as f64;
        for (f, &n) in norms.iter().enumerate() {
            if n < tol * mean_norm {
                elimination.push((layer_id.clone(), f));
            }
        }
        for a in 0..co {
            if norms[a] == 0.0 {
                continue;
            }
            for b in (a + 1)..co {
                if norms[b] == 0.0 {
                    continue;
                }
                let dot: f64 = weights.data()[a * per..(a + 1) * per]
                    .iter()
                    .zip(&weights.data()[b * per..(b + 1) * per])
                    .map(|(x, y)| x * y)
                    .sum();
                if dot / (norms[a] * norms[b]) > 1.0 - tol {
                    overlap.push((layer_id.clone(), a, b));
                }
            }
        }
    }

    // rank deficits of conv outputs on the probe batch
    let pass = forward(model, batch, None, Phase::Calibrate)?;
    let mut linearity = Vec::new();
    collect_linearity(
        &model.layers,
        "",
        &pass.records,
        &mut linearity,
    )?;

    Ok(SingularityReport {
        elimination,
        overlap,
        linearity,
    })
}

fn collect_linearity(
    layers: &[crate::nn::LayerSpec],
    prefix: &str,
    records: &[crate::nn::LayerRecord],
    out: &mut Vec<(String, usize)>,
) -> Result<()> {
    for (i, spec) in layers.iter().enumerate() {
        let path = if prefix.is_empty() {
            i.to_string()
        } else {
            format!("{prefix}.{i}")
        };
        match &spec.kind {
            LayerKind::Conv(_) => {
                let deficit = activation_rank_deficit(&records[i].output)?;
                if deficit > 0 {
                    out.push((path, deficit));
                }
            }
            LayerKind::ResidualBlock { members } => {
                if let crate::nn::Aux::Block { inner, .. } = &records[i].aux {
                    collect_linearity(members, &path, inner, out)?;
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Rank deficit of a `(n, c, h, w)` activation tensor viewed as
/// `n*h*w` observations of `c` variables, judged by the PCA eigenvalue
/// clamp threshold.
pub fn activation_rank_deficit(activations: &Tensor) -> Result<usize> {
    let s = activations.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = n * h * w;
    let mut obs = Tensor::zeros(&[rows, c]);
    for sample in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = activations.data()[((sample * c + ch) * h + y) * w + x];
                    obs.set2((sample * h + y) * w + x, ch, v);
                }
            }
        }
    }
    let spectrum = pca_spectrum(&obs, false)?;
    if spectrum.degenerate {
        return Ok(c);
    }
    let lmax = spectrum.eigenvalues[0];
    let rank = spectrum
        .eigenvalues
        .iter()
        .filter(|&&l| l >= EIGENVALUE_CLAMP * lmax)
        .count();
    Ok(c - rank)
}
