//! Symmetric eigendecomposition, covariance and PCA spectra.
//!
//! The eigensolver is a cyclic Jacobi rotation scheme (Numerical Recipes
//! style). It is foolproof for real symmetric matrices and the covariance
//! matrices here are small (one per layer, channels x channels), so the
//! extra constant factor over QR is irrelevant.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

/// Ratio below the largest eigenvalue under which an eigenvalue is treated
/// as exactly zero for rank counting.
pub const EIGENVALUE_CLAMP: f64 = 1e-12;

/// Eigenvalues (descending), orthonormal eigenvector columns and the
/// variance share carried by each direction.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    pub eigenvalues: Vec<f64>,
    /// n x n tensor; column i is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Tensor,
    /// `eigenvalue_i / sum(eigenvalues)` after clamping; empty when some
    /// eigenvalue is negative beyond tolerance, all zeros when the total
    /// variance vanishes (see `degenerate`).
    pub explained_variance_ratio: Vec<f64>,
    /// Set when the spectrum carries no variance at all.
    pub degenerate: bool,
}

impl SpectralDecomposition {
    fn from_pairs(mut pairs: Vec<(f64, Vec<f64>)>) -> Self {
        // Descending eigenvalues; ties keep original index order.
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let n = pairs.len();
        let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let mut vecs = Tensor::zeros(&[n, n]);
        for (col, (_, v)) in pairs.iter().enumerate() {
            for (row, &x) in v.iter().enumerate() {
                vecs.set2(row, col, x);
            }
        }
        let (ratio, degenerate) = explained_ratios(&eigenvalues);
        SpectralDecomposition {
            eigenvalues,
            eigenvectors: vecs,
            explained_variance_ratio: ratio,
            degenerate,
        }
    }

    /// V diag(lambda) V^T, for reconstruction checks.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for (k, &l) in self.eigenvalues.iter().enumerate() {
                    acc += self.eigenvectors.at2(i, k) * l * self.eigenvectors.at2(j, k);
                }
                out.set2(i, j, acc);
            }
        }
        out
    }
}

fn explained_ratios(eigenvalues: &[f64]) -> (Vec<f64>, bool) {
    let lambda_max = eigenvalues.iter().cloned().fold(0.0f64, |a, b| a.max(b));
    let neg_tol = 1e-10 * lambda_max.max(1.0);
    if eigenvalues.iter().any(|&l| l < -neg_tol) {
        return (Vec::new(), false);
    }
    let clamped: Vec<f64> = eigenvalues
        .iter()
        .map(|&l| if l < EIGENVALUE_CLAMP * lambda_max { 0.0 } else { l })
        .collect();
    let total: f64 = clamped.iter().sum();
    if total <= 0.0 {
        return (vec![0.0; eigenvalues.len()], true);
    }
    (clamped.iter().map(|&l| l / total).collect(), false)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn sym_eig(m: &Tensor) -> Result<SpectralDecomposition> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return Err(Error::ShapeMismatch {
            context: "sym_eig",
            left: m.shape().to_vec(),
            right: m.shape().to_vec(),
        });
    }
    let n = m.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput("sym_eig"));
    }
    let scale = m.data().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let sym_tol = 1e-10 * scale.max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.at2(i, j) - m.at2(j, i)).abs() > sym_tol {
                return Err(Error::InvalidArgument(format!(
                    "sym_eig: input not symmetric at ({i},{j}): {} vs {}",
                    m.at2(i, j),
                    m.at2(j, i)
                )));
            }
        }
    }
    m.check_finite("sym_eig input")?;

    // Work on an exactly symmetric copy.
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (m.at2(i, j) + m.at2(j, i));
        }
    }
    let mut v = vec![0.0f64; n * n];
    for p in 0..n {
        v[p * n + p] = 1.0;
    }
    let mut d: Vec<f64> = (0..n).map(|p| a[p * n + p]).collect();
    let mut b = d.clone();
    let mut z = vec![0.0f64; n];

    let mut converged = false;
    for sweep in 0..100 {
        let mut sm = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                sm += a[p * n + q].abs();
            }
        }
        if sm == 0.0 {
            converged = true;
            break;
        }
        let tresh = if sweep < 3 {
            0.2 * sm / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let g = 100.0 * a[p * n + q].abs();
                if sweep > 3 && d[p].abs() + g == d[p].abs() && d[q].abs() + g == d[q].abs() {
                    a[p * n + q] = 0.0;
                } else if a[p * n + q].abs() > tresh {
                    let mut h = d[q] - d[p];
                    let t = if h.abs() + g == h.abs() {
                        a[p * n + q] / h
                    } else {
                        let theta = 0.5 * h / a[p * n + q];
                        let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                        if theta < 0.0 {
                            t = -t;
                        }
                        t
                    };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    let tau = s / (1.0 + c);
                    h = t * a[p * n + q];
                    z[p] -= h;
                    z[q] += h;
                    d[p] -= h;
                    d[q] += h;
                    a[p * n + q] = 0.0;
                    let rotate = |m: &mut [f64], i: usize, j: usize, k: usize, l: usize| {
                        let g = m[i * n + j];
                        let h = m[k * n + l];
                        m[i * n + j] = g - s * (h + g * tau);
                        m[k * n + l] = h + s * (g - h * tau);
                    };
                    for j in 0..p {
                        rotate(&mut a, j, p, j, q);
                    }
                    for j in (p + 1)..q {
                        rotate(&mut a, p, j, j, q);
                    }
                    for j in (q + 1)..n {
                        rotate(&mut a, p, j, q, j);
                    }
                    for j in 0..n {
                        rotate(&mut v, j, p, j, q);
                    }
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            d[p] = b[p];
            z[p] = 0.0;
        }
    }
    if !converged {
        return Err(Error::InvalidArgument(
            "sym_eig: Jacobi sweep limit exceeded".into(),
        ));
    }

    let pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|col| (d[col], (0..n).map(|row| v[row * n + col]).collect()))
        .collect();
    Ok(SpectralDecomposition::from_pairs(pairs))
}

/// Covariance (or raw second-moment) matrix of row observations.
///
/// `center` subtracts column means and normalizes by `n_obs - 1`; without
/// it the result is the raw second moment `E[g g^T]` over `n_obs`.
pub fn covariance(observations: &Tensor, center: bool) -> Result<Tensor> {
    if observations.rank() != 2 {
        return Err(Error::ShapeMismatch {
            context: "covariance",
            left: observations.shape().to_vec(),
            right: vec![],
        });
    }
    let (n_obs, n_var) = (observations.shape()[0], observations.shape()[1]);
    let min_obs = if center { 2 } else { 1 };
    if n_obs < min_obs {
        return Err(Error::InvalidArgument(format!(
            "covariance: {n_obs} observations, need at least {min_obs}"
        )));
    }
    let data = observations.data();
    let means: Vec<f64> = if center {
        (0..n_var)
            .map(|j| (0..n_obs).map(|i| data[i * n_var + j]).sum::<f64>() / n_obs as f64)
            .collect()
    } else {
        vec![0.0; n_var]
    };
    let norm = if center { (n_obs - 1) as f64 } else { n_obs as f64 };

    let mut cov = Tensor::zeros(&[n_var, n_var]);
    par::for_each_chunk_mut(cov.data_mut(), n_var, |i, row| {
        for j in i..n_var {
            let mut acc = 0.0;
            for k in 0..n_obs {
                acc += (data[k * n_var + i] - means[i]) * (data[k * n_var + j] - means[j]);
            }
            row[j] = acc / norm;
        }
    });
    // Mirror the strict upper triangle; exact symmetry by construction.
    for i in 0..n_var {
        for j in (i + 1)..n_var {
            let v = cov.at2(i, j);
            cov.set2(j, i, v);
        }
    }
    Ok(cov)
}

/// PCA spectrum of row observations: eigendecomposition of their
/// covariance with explained-variance ratios populated.
pub fn pca_spectrum(observations: &Tensor, center: bool) -> Result<SpectralDecomposition> {
    let cov = covariance(observations, center)?;
    sym_eig(&cov)
}
