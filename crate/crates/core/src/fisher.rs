//! Fisher information as the uncentered second moment of per-sample
//! gradients, finite-difference Hessians to compare it against, and the
//! logistic toy harness that exercises the equivalence numerically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{forward, ModelSpec, Phase};
use crate::tensor::Tensor;

/// Uncentered second-moment matrix of per-sample gradient vectors.
#[derive(Debug, Clone)]
pub struct FisherEstimate {
    pub matrix: Tensor,
    pub sample_count: usize,
}

/// `E[g g^T]` over the sample gradients, normalized by the sample count.
pub fn fisher_from_gradients(per_sample_grads: &[Vec<f64>]) -> Result<FisherEstimate> {
    if per_sample_grads.len() < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 gradient samples".into(),
        ));
    }
    let dim = per_sample_grads[0].len();
    for (i, g) in per_sample_grads.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::ShapeMismatch {
                context: "fisher_from_gradients",
                left: vec![dim],
                right: vec![i, g.len()],
            });
        }
    }
    let n = per_sample_grads.len() as f64;
    let mut m = Tensor::zeros(&[dim, dim]);
    for g in per_sample_grads {
        for i in 0..dim {
            if g[i] == 0.0 {
                continue;
            }
            for j in i..dim {
                let v = m.at2(i, j) + g[i] * g[j];
                m.set2(i, j, v);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = m.at2(i, j) / n;
            m.set2(i, j, v);
            m.set2(j, i, v);
        }
    }
    Ok(FisherEstimate {
        matrix: m,
        sample_count: per_sample_grads.len(),
    })
}

/// Symmetrized central-difference Hessian of `loss` at `theta`,
/// step `h` (the classic choice is 1e-4).
pub fn hessian_finite_difference<F>(theta: &[f64], loss: F, h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> f64,
{
    let dim = theta.len();
    if dim == 0 || dim > 64 {
        return Err(Error::InvalidArgument(format!(
            "finite-difference Hessian supports 1..=64 parameters, got {dim}"
        )));
    }
    let mut probe = theta.to_vec();
    let mut eval = |di: f64, i: usize, dj: f64, j: usize| -> f64 {
        probe.copy_from_slice(theta);
        probe[i] += di;
        probe[j] += dj;
        loss(&probe)
    };
    let mut hess = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        for j in i..dim {
            let v = (eval(h, i, h, j) - eval(h, i, -h, j) - eval(-h, i, h, j)
                + eval(-h, i, -h, j))
                / (4.0 * h * h);
            hess.set2(i, j, v);
            hess.set2(j, i, v);
        }
    }
    // (H + H^T)/2 is implicit in the mirrored fill; reject non-finite
    hess.check_finite("hessian_finite_difference")?;
    Ok(hess)
}

/// Finite-difference Hessian of the mean batch loss with respect to a
/// small subset of model parameter entries given as `(key, index)` pairs.
pub fn model_hessian_fd(
    model: &ModelSpec,
    batch: &Tensor,
    labels: &[usize],
    param_ids: &[(String, usize)],
    h: f64,
) -> Result<Tensor> {
    let theta: Vec<f64> = param_ids
        .iter()
        .map(|(k, i)| model.params[k].data()[*i])
        .collect();
    let loss = |t: &[f64]| -> f64 {
        let mut probe = model.clone();
        for ((k, i), &v) in param_ids.iter().zip(t) {
            probe.params.get_mut(k).unwrap().data_mut()[*i] = v;
        }
        forward(&probe, batch, Some(labels), Phase::Calibrate)
            .map(|p| p.loss.unwrap())
            .unwrap_or(f64::NAN)
    };
    hessian_finite_difference(&theta, loss, h)
}

/// Result of the logistic Fisher-vs-Hessian comparison.
#[derive(Debug, Clone, Copy)]
pub struct FisherHessianCheck {
    pub gradient_norm: f64,
    pub relative_frobenius_distance: f64,
    pub newton_iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Trains a 2-parameter logistic model on `n` synthetic samples drawn
/// from a true logistic distribution, then compares the uncentered
/// second moment of per-sample NLL gradients against the
/// finite-difference Hessian of the mean NLL at the optimum.
pub fn logistic_fisher_hessian_check(n: usize, seed: u64) -> Result<FisherHessianCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let theta_true = [0.8, -0.5];
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = [normal.sample(&mut rng), normal.sample(&mut rng)];
        let p = sigmoid(theta_true[0] * x[0] + theta_true[1] * x[1]);
        ys.push(if rng.random_range(0.0..1.0) < p { 1.0 } else { 0.0 });
        xs.push(x);
    }

    // Newton's method on the convex NLL
    let mut theta = [0.0f64; 2];
    let mut grad_norm = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..100 {
        iters += 1;
        let mut g = [0.0f64; 2];
        let mut hess = [[0.0f64; 2]; 2];
        for (x, &y) in xs.iter().zip(&ys) {
            let p = sigmoid(theta[0] * x[0] + theta[1] * x[1]);
            let d = p - y;
            g[0] += d * x[0];
            g[1] += d * x[1];
            let wgt = p * (1.0 - p);
            hess[0][0] += wgt * x[0] * x[0];
            hess[0][1] += wgt * x[0] * x[1];
            hess[1][1] += wgt * x[1] * x[1];
        }
        let inv_n = 1.0 / n as f64;
        g[0] *= inv_n;
        g[1] *= inv_n;
        let (a, b, d) = (
            hess[0][0] * inv_n,
            hess[0][1] * inv_n,
            hess[1][1] * inv_n,
        );
        grad_norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        if grad_norm < 1e-10 {
            break;
        }
        let det = a * d - b * b;
        if det.abs() < 1e-300 {
            return Err(Error::InvalidArgument(
                "singular Hessian in logistic fit".into(),
            ));
        }
        theta[0] -= (d * g[0] - b * g[1]) / det;
        theta[1] -= (-b * g[0] + a * g[1]) / det;
    }
    if grad_norm >= 1e-5 {
        return Err(Error::InvalidArgument(format!(
            "logistic fit stalled at gradient norm {grad_norm}"
        )));
    }

    // per-sample NLL gradients at the optimum
    let grads: Vec<Vec<f64>> = xs
        .iter()
        .zip(&ys)
        .map(|(x, &y)| {
            let p = sigmoid(theta[0] * x[0] + theta[1] * x[1]);
            let d = p - y;
            vec![d * x[0], d * x[1]]
        })
        .collect();
    let fisher = fisher_from_gradients(&grads)?;

    let mean_nll = |t: &[f64]| -> f64 {
        let mut total = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            let z = t[0] * x[0] + t[1] * x[1];
            // numerically stable -[y ln p + (1-y) ln (1-p)]
            total += z.max(0.0) - y * z + (1.0 + (-z.abs()).exp()).ln();
        }
        total / xs.len() as f64
    };
    let hess = hessian_finite_difference(&theta, mean_nll, 1e-4)?;

    let mut num = 0.0;
    let mut den = 0.0;
    for (f, h) in fisher.matrix.data().iter().zip(hess.data()) {
        num += (f - h) * (f - h);
        den += h * h;
    }
    Ok(FisherHessianCheck {
        gradient_norm: grad_norm,
        relative_frobenius_distance: (num / den).sqrt(),
        newton_iterations: iters,
    })
}
