//! Layer-wise pruning error and its propagation bound through downstream
//! weight norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward, ModelSpec, Phase};
use crate::tensor::Tensor;

/// Mean squared Frobenius discrepancy `(1/n) ||a - b||_F^2` with `n` the
/// element count.
pub fn layer_pruning_error(original: &Tensor, pruned: &Tensor) -> Result<f64> {
    if original.shape() != pruned.shape() {
        return Err(Error::ShapeMismatch {
            context: "layer_pruning_error",
            left: original.shape().to_vec(),
            right: pruned.shape().to_vec(),
        });
    }
    let n = original.len() as f64;
    let sum: f64 = original
        .data()
        .iter()
        .zip(pruned.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n)
}

/// Propagation bound on the final-output error: per-layer error
/// contributions are amplified by the product of downstream weight
/// Frobenius norms.
///
/// `weight_norms[i]` is the norm of layer `i + 1` (the first layer needs
/// none); `pe_deltas[k]` is layer `k`'s pruning-error perturbation, so
/// `weight_norms.len() + 1 == pe_deltas.len()`.
pub fn accumulated_error_bound(weight_norms: &[f64], pe_deltas: &[f64]) -> Result<f64> {
    if pe_deltas.is_empty() {
        return Err(Error::EmptyInput("accumulated_error_bound"));
    }
    if weight_norms.len() + 1 != pe_deltas.len() {
        return Err(Error::ShapeMismatch {
            context: "accumulated_error_bound",
            left: vec![weight_norms.len()],
            right: vec![pe_deltas.len()],
        });
    }
    if weight_norms.iter().chain(pe_deltas).any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument(
            "norms and error deltas must be non-negative".into(),
        ));
    }
    let layers = pe_deltas.len();
    let mut bound = 0.0;
    for k in 0..layers {
        let amplification: f64 = weight_norms[k..].iter().product();
        bound += amplification * pe_deltas[k].sqrt();
    }
    Ok(bound)
}

/// Per-layer error accounting for a pruned model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    /// `(layer, PE)` for each conv stage.
    pub per_layer_pe: Vec<(String, f64)>,
    /// Frobenius norms of the surviving conv weights, in order.
    pub weight_norms: Vec<(String, f64)>,
    pub accumulated_bound: f64,
    pub measured_output_error: f64,
}

/// Zeroes the given filters of one conv layer and compares the perturbed
/// network against the original on a probe batch.
///
/// The model must be a plain top-level conv(+activation) chain; the
/// measured error is `(1/sqrt n) ||Y' - Y||_F` at the final record, the
/// bound follows from the local pruning error at the
/// perturbed layer and the downstream weight norms.
pub fn single_layer_removal_check(
    model: &ModelSpec,
    batch: &Tensor,
    layer_path: &str,
    filters_to_zero: &[usize],
) -> Result<ErrorReport> {
    let conv_paths: Vec<String> = crate::entropy::collect_conv_layers(model);
    let layer_index = conv_paths
        .iter()
        .position(|p| p == layer_path)
        .ok_or_else(|| Error::InvalidArgument(format!("no conv layer at '{layer_path}'")))?;
    if conv_paths.iter().any(|p| p.contains('.')) {
        return Err(Error::InvalidArgument(
            "error propagation check requires a plain conv chain".into(),
        ));
    }

    let mut perturbed = model.clone();
    {
        let w = perturbed
            .params
            .get_mut(&format!("{layer_path}.weight"))
            .ok_or_else(|| Error::InvalidArgument(format!("no weights at '{layer_path}'")))?;
        let s = w.shape().to_vec();
        let per = s[1] * s[2] * s[3];
        for &f in filters_to_zero {
            if f >= s[0] {
                return Err(Error::InvalidArgument(format!(
                    "filter {f} out of range for layer {layer_path}"
                )));
            }
            w.data_mut()[f * per..(f + 1) * per]
                .iter_mut()
                .for_each(|x| *x = 0.0);
        }
        if let Some(b) = perturbed.params.get_mut(&format!("{layer_path}.bias")) {
            for &f in filters_to_zero {
                b.data_mut()[f] = 0.0;
            }
        }
    }

    let original = forward(model, batch, None, Phase::Eval)?;
    let modified = forward(&perturbed, batch, None, Phase::Eval)?;

    // records are index-aligned because the perturbation is value-only
    let mut per_layer_pe = Vec::new();
    for (i, path) in conv_paths.iter().enumerate() {
        let rec_idx: usize = path.parse().map_err(|_| {
            Error::InvalidArgument(format!("unexpected nested layer path '{path}'"))
        })?;
        let pe = if i == layer_index {
            layer_pruning_error(
                &original.records[rec_idx].output,
                &modified.records[rec_idx].output,
            )?
        } else {
            0.0
        };
        per_layer_pe.push((path.clone(), pe));
    }

    let weight_norms: Vec<(String, f64)> = conv_paths
        .iter()
        .skip(1)
        .map(|p| {
            (
                p.clone(),
                perturbed.params[&format!("{p}.weight")].frobenius_norm(),
            )
        })
        .collect();

    let norms: Vec<f64> = weight_norms.iter().map(|(_, n)| *n).collect();
    let pes: Vec<f64> = per_layer_pe.iter().map(|(_, p)| *p).collect();
    let accumulated_bound = accumulated_error_bound(&norms, &pes)?;

    let y0 = original.output();
    let y1 = modified.output();
    let mut diff = 0.0;
    for (a, b) in y0.data().iter().zip(y1.data()) {
        diff += (a - b) * (a - b);
    }
    let measured_output_error = (diff / y0.len() as f64).sqrt();

    Ok(ErrorReport {
        per_layer_pe,
        weight_norms,
        accumulated_bound,
        measured_output_error,
    })
}
