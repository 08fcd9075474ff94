//! Independent verification routes.
//!
//! Everything here deliberately avoids the code paths it checks: the
//! eigenvalue oracles use characteristic polynomials and a Householder+QL
//! scheme instead of Jacobi rotations, and the gradient check uses central
//! finite differences of the forward pass instead of backpropagation.
//! The `verify` CLI command and the acceptance suite both run these.

use crate::error::{Error, Result};
use crate::nn::{backward, forward, ModelSpec, Phase};
use crate::tensor::Tensor;

/// Eigenvalues (descending) of a symmetric matrix of order <= 4 via
/// Sturm-sequence bisection on the characteristic polynomial.
pub fn charpoly_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let n = m.shape()[0];
    if m.rank() != 2 || m.shape()[1] != n || n == 0 || n > 4 {
        return Err(Error::InvalidArgument(
            "charpoly oracle handles symmetric matrices of order 1..=4".into(),
        ));
    }
    // characteristic polynomial coefficients by Faddeev-LeVerrier:
    // p(x) = x^n + c[1] x^(n-1) + ... + c[n]
    let mut coeffs = vec![1.0f64];
    let mut mk = Tensor::identity(n);
    for k in 1..=n {
        mk = crate::tensor::matmul(m, &mk)?;
        let trace: f64 = (0..n).map(|i| mk.at2(i, i)).sum();
        let c = -trace / k as f64;
        coeffs.push(c);
        for i in 0..n {
            let v = mk.at2(i, i) + c;
            mk.set2(i, i, v);
        }
    }

    // Gershgorin bound for the root interval
    let mut bound = 0.0f64;
    for i in 0..n {
        let r: f64 = (0..n).map(|j| m.at2(i, j).abs()).sum();
        bound = bound.max(r);
    }
    bound += 1.0;

    let roots = real_roots_by_sturm(&coeffs, -bound, bound)?;
    let mut sorted = roots;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sorted)
}

fn poly_eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().fold(0.0, |acc, &c| acc * x + c)
}

/// Sturm chain root isolation and bisection. `coeffs` are highest degree
/// first with leading coefficient 1; all roots of a symmetric matrix's
/// characteristic polynomial are real, so the chain accounts for every
/// root (with multiplicity collapsing to one isolated point each).
fn real_roots_by_sturm(coeffs: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    let n = coeffs.len() - 1;
    // Sturm chain: p0 = p, p1 = p', p_{k+1} = -rem(p_{k-1}, p_k)
    let mut chain: Vec<Vec<f64>> = Vec::new();
    chain.push(coeffs.to_vec());
    let deriv: Vec<f64> = coeffs[..n]
        .iter()
        .enumerate()
        .map(|(i, &c)| c * (n - i) as f64)
        .collect();
    chain.push(deriv);
    loop {
        let a = &chain[chain.len() - 2];
        let b = &chain[chain.len() - 1];
        if b.len() <= 1 {
            break;
        }
        let mut rem = poly_rem(a, b);
        if rem.iter().all(|&c| c.abs() < 1e-300) {
            break;
        }
        for c in rem.iter_mut() {
            *c = -*c;
        }
        chain.push(rem);
        if chain.last().unwrap().len() <= 1 {
            break;
        }
    }

    let variations = |x: f64| -> usize {
        let mut count = 0;
        let mut prev = 0.0f64;
        for p in &chain {
            let v = poly_eval(p, x);
            if v != 0.0 {
                if prev != 0.0 && v.signum() != prev.signum() {
                    count += 1;
                }
                prev = v;
            }
        }
        count
    };

    // recursively split until each interval holds exactly one distinct root
    let mut intervals = vec![(lo, hi)];
    let mut isolated = Vec::new();
    let mut guard = 0;
    while let Some((a, b)) = intervals.pop() {
        guard += 1;
        if guard > 10_000 {
            return Err(Error::InvalidArgument(
                "sturm isolation failed to converge".into(),
            ));
        }
        let count = variations(a).saturating_sub(variations(b));
        if count == 0 {
            continue;
        }
        if count == 1 || (b - a) < 1e-12 {
            isolated.push(((a, b), count));
            continue;
        }
        let mid = 0.5 * (a + b);
        intervals.push((a, mid));
        intervals.push((mid, b));
    }

    let mut roots = Vec::new();
    for ((mut a, mut b), count) in isolated {
        for _ in 0..200 {
            let mid = 0.5 * (a + b);
            if variations(a).saturating_sub(variations(mid)) >= 1 {
                b = mid;
            } else {
                a = mid;
            }
            if b - a < 1e-13 * b.abs().max(1.0) {
                break;
            }
        }
        let root = 0.5 * (a + b);
        for _ in 0..count {
            roots.push(root);
        }
    }
    Ok(roots)
}

/// Polynomial remainder of a / b (coefficients highest-degree first).
fn poly_rem(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = a.to_vec();
    let db = b.len() - 1;
    while r.len() > db && r.len() > 1 {
        let factor = r[0] / b[0];
        for i in 0..b.len() {
            r[i] -= factor * b[i];
        }
        r.remove(0);
    }
    r
}

/// Eigenvalues (descending) of a symmetric matrix via Householder
/// tridiagonalization followed by QL iterations with implicit shifts.
pub fn ql_eigenvalues(m: &Tensor) -> Result<Vec<f64>> {
    let n = m.shape()[0];
    if m.rank() != 2 || m.shape()[1] != n || n == 0 {
        return Err(Error::InvalidArgument("ql oracle needs a square matrix".into()));
    }
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (m.at2(i, j) + m.at2(j, i))).collect())
        .collect();
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];

    // tred2 without eigenvector accumulation
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let scale: f64 = (0..=l).map(|k| a[i][k].abs()).sum();
            if scale == 0.0 {
                e[i] = a[i][l];
            } else {
                for k in 0..=l {
                    a[i][k] /= scale;
                    h += a[i][k] * a[i][k];
                }
                let mut f = a[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i][l] = f - g;
                f = 0.0;
                for j in 0..=l {
                    let mut g = 0.0;
                    for k in 0..=j {
                        g += a[j][k] * a[i][k];
                    }
                    for k in (j + 1)..=l {
                        g += a[k][j] * a[i][k];
                    }
                    e[j] = g / h;
                    f += e[j] * a[i][j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let f = a[i][j];
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a[j][k] -= f * e[k] + g * a[i][k];
                    }
                }
            }
        } else {
            e[i] = a[i][l];
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        d[i] = a[i][i];
    }

    // tqli on (d, e), values only
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut mm = l;
            while mm + 1 < n {
                let dd = d[mm].abs() + d[mm + 1].abs();
                if e[mm].abs() <= f64::EPSILON * dd {
                    break;
                }
                mm += 1;
            }
            if mm == l {
                break;
            }
            iter += 1;
            if iter > 50 {
                return Err(Error::InvalidArgument("ql oracle failed to converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[mm] - d[l] + e[l] / (g + if g >= 0.0 { r.abs() } else { -r.abs() });
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            let mut underflow = false;
            for i in (l..mm).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[mm] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[mm] = 0.0;
        }
    }

    d.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(d)
}

/// Central finite-difference gradient of the batch loss with respect to
/// one parameter entry. `phase` must match the analytic pass.
pub fn finite_difference_gradient(
    model: &ModelSpec,
    batch: &Tensor,
    labels: &[usize],
    key: &str,
    index: usize,
    step: f64,
) -> Result<f64> {
    let mut probe = model.clone();
    let original = probe.params[key].data()[index];

    probe.params.get_mut(key).unwrap().data_mut()[index] = original + step;
    let up = forward(&probe, batch, Some(labels), Phase::Calibrate)?
        .loss
        .unwrap();
    probe.params.get_mut(key).unwrap().data_mut()[index] = original - step;
    let down = forward(&probe, batch, Some(labels), Phase::Calibrate)?
        .loss
        .unwrap();
    Ok((up - down) / (2.0 * step))
}

/// Checks analytic gradients of `count` deterministically-sampled
/// parameter entries against central differences; returns the worst
/// relative error.
pub fn gradient_check(
    model: &ModelSpec,
    batch: &Tensor,
    labels: &[usize],
    count: usize,
    step: f64,
    seed: u64,
) -> Result<f64> {
    use rand::{Rng, SeedableRng};
    let pass = forward(model, batch, Some(labels), Phase::Calibrate)?;
    let snap = backward(model, batch, labels, &pass)?;
    let keys: Vec<&String> = snap.grads.keys().collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let key = keys[rng.random_range(0..keys.len())];
        let len = snap.grads[key].len();
        let idx = rng.random_range(0..len);
        let analytic = snap.grads[key].data()[idx];
        let numeric = finite_difference_gradient(model, batch, labels, key, idx, step)?;
        let rel = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Outcome of one embedded verification suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Runs the three oracle suites: the eigensolver against both
/// independent oracles, analytic gradients against central differences,
/// and the gradient second moment against the finite-difference Hessian
/// on the logistic toy model.
pub fn verification_suites() -> Result<Vec<SuiteResult>> {
    use crate::linalg::sym_eig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let mut results = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let random_sym = |n: usize, rng: &mut ChaCha8Rng| {
        let mut m = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-2.0..2.0);
                m.set2(i, j, v);
                m.set2(j, i, v);
            }
        }
        m
    };
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let m = random_sym(8, &mut rng);
        let jac = sym_eig(&m)?.eigenvalues;
        let ql = ql_eigenvalues(&m)?;
        for (a, b) in jac.iter().zip(&ql) {
            worst = worst.max((a - b).abs());
        }
    }
    for _ in 0..10 {
        let n = rng.random_range(2..=4usize);
        let m = random_sym(n, &mut rng);
        let jac = sym_eig(&m)?.eigenvalues;
        let cp = charpoly_eigenvalues(&m)?;
        for (a, b) in jac.iter().zip(&cp) {
            worst = worst.max((a - b).abs());
        }
    }
    results.push(SuiteResult {
        name: "eigensolver-oracle",
        passed: worst <= 1e-8,
        detail: format!("worst |lambda - oracle| = {worst:.3e}"),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(1021);
    let batch = Tensor::from_vec(
        &[8, 1, 16, 16],
        (0..8 * 256).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let labels: Vec<usize> = (0..8).map(|i| i % 10).collect();
    let model = crate::nn::presets::tiny_cnn(1, 16, 16, 10, 76)?;
    let worst = gradient_check(&model, &batch, &labels, 20, 1e-5, 5)?;
    results.push(SuiteResult {
        name: "finite-difference-gradients",
        passed: worst <= 1e-4,
        detail: format!("worst relative error = {worst:.3e}"),
    });

    let check = crate::fisher::logistic_fisher_hessian_check(50_000, 1234)?;
    results.push(SuiteResult {
        name: "fisher-hessian-identity",
        passed: check.relative_frobenius_distance <= 0.15,
        detail: format!(
            "relative Frobenius distance = {:.4}, gradient norm = {:.2e}",
            check.relative_frobenius_distance, check.gradient_norm
        ),
    });

    Ok(results)
}
