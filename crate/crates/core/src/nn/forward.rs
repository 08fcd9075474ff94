//! Forward pass with per-layer activation retention.
//!
//! Batch-level loops fan out through [`crate::par`]; every output cell is
//! produced by one closure with a fixed-order inner reduction, so results
//! do not depend on thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

use super::{ConvSpec, LayerKind, LayerSpec, ModelSpec, ParamMap, BN_EPS};

/// Statistics mode for batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics; records running-stat updates for the trainer.
    Train,
    /// Running statistics (inference).
    Eval,
    /// Batch statistics without touching running buffers (gradient capture).
    Calibrate,
}

#[derive(Debug, Clone)]
pub enum Aux {
    None,
    BatchNorm {
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    MaxPool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    AvgPool {
        input_shape: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Softmax {
        probs: Tensor,
    },
    Block {
        inner: Vec<LayerRecord>,
        sum: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct LayerRecord {
    /// Post-layer output `x_l` (for conv this is the pre-activation `Z_l`;
    /// the following ReLU record holds the activated value).
    pub output: Tensor,
    pub aux: Aux,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub records: Vec<LayerRecord>,
    /// Mean cross-entropy when labels were supplied and the net ends in
    /// a softmax layer.
    pub loss: Option<f64>,
}

impl ForwardPass {
    pub fn output(&self) -> &Tensor {
        &self.records.last().expect("non-empty model").output
    }

    /// Argmax class per sample from the terminal layer.
    pub fn predictions(&self) -> Vec<usize> {
        let out = self.output();
        let classes = out.shape()[1];
        let n = out.shape()[0];
        (0..n)
            .map(|i| {
                let row = &out.data()[i * classes..(i + 1) * classes];
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(j, _)| j)
                    .unwrap()
            })
            .collect()
    }
}

pub fn forward(
    model: &ModelSpec,
    batch: &Tensor,
    labels: Option<&[usize]>,
    phase: Phase,
) -> Result<ForwardPass> {
    if batch.rank() != 4 {
        return Err(Error::LayerMismatch {
            index: "0".into(),
            detail: format!("expected rank-4 batch, got shape {:?}", batch.shape()),
        });
    }
    let mut records = Vec::with_capacity(model.layers.len());
    let mut loss = None;
    run_chain(
        &model.layers,
        "",
        &model.params,
        batch,
        labels,
        phase,
        &mut records,
        &mut loss,
    )?;
    Ok(ForwardPass { records, loss })
}

#[allow(clippy::too_many_arguments)]
fn run_chain(
    layers: &[LayerSpec],
    prefix: &str,
    params: &ParamMap,
    input: &Tensor,
    labels: Option<&[usize]>,
    phase: Phase,
    records: &mut Vec<LayerRecord>,
    loss: &mut Option<f64>,
) -> Result<()> {
    for (i, spec) in layers.iter().enumerate() {
        let path = super::join_path(prefix, i);
        let current = match records.last() {
            Some(r) => &r.output,
            None => input,
        };
        let record = apply_layer(spec, &path, params, current, labels, phase, loss)?;
        records.push(record);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn apply_layer(
    spec: &LayerSpec,
    path: &str,
    params: &ParamMap,
    input: &Tensor,
    labels: Option<&[usize]>,
    phase: Phase,
    loss: &mut Option<f64>,
) -> Result<LayerRecord> {
    let mismatch = |detail: String| Error::LayerMismatch {
        index: path.to_string(),
        detail,
    };
    match &spec.kind {
        LayerKind::Conv(c) => {
            if input.rank() != 4 || input.shape()[1] != c.in_channels {
                return Err(mismatch(format!(
                    "conv expects (n,{},h,w), got {:?}",
                    c.in_channels,
                    input.shape()
                )));
            }
            let weight = &params[&format!("{path}.weight")];
            let bias = params.get(&format!("{path}.bias"));
            let out = conv_forward(input, weight, bias, c)?;
            Ok(LayerRecord {
                output: out,
                aux: Aux::None,
            })
        }
        LayerKind::BatchNorm { channels } => {
            if input.rank() != 4 || input.shape()[1] != *channels {
                return Err(mismatch(format!(
                    "batchnorm over {channels} channels, got {:?}",
                    input.shape()
                )));
            }
            batchnorm_forward(input, path, params, phase)
        }
        LayerKind::Relu => {
            let mut out = input.clone();
            out.data_mut().iter_mut().for_each(|x| {
                if *x < 0.0 {
                    *x = 0.0
                }
            });
            Ok(LayerRecord {
                output: out,
                aux: Aux::None,
            })
        }
        LayerKind::MaxPool { size, stride } => maxpool_forward(input, *size, *stride, path),
        LayerKind::AvgPool { size, stride } => avgpool_forward(input, *size, *stride, path),
        LayerKind::Flatten => {
            let shape = input.shape().to_vec();
            let n = shape[0];
            let rest: usize = shape[1..].iter().product();
            let out = input.clone().reshape(&[n, rest])?;
            Ok(LayerRecord {
                output: out,
                aux: Aux::Flatten { input_shape: shape },
            })
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            if input.rank() != 2 || input.shape()[1] != *in_features {
                return Err(mismatch(format!(
                    "linear expects (n,{in_features}), got {:?}",
                    input.shape()
                )));
            }
            let weight = &params[&format!("{path}.weight")];
            let bias = &params[&format!("{path}.bias")];
            let n = input.shape()[0];
            let mut out = Tensor::zeros(&[n, *out_features]);
            let (ind, wd, bd) = (input.data(), weight.data(), bias.data());
            let fi = *in_features;
            let fo = *out_features;
            par::for_each_chunk_mut(out.data_mut(), fo, |s, row| {
                let x = &ind[s * fi..(s + 1) * fi];
                for (o, r) in row.iter_mut().enumerate() {
                    let wrow = &wd[o * fi..(o + 1) * fi];
                    let mut acc = bd[o];
                    for (a, b) in x.iter().zip(wrow) {
                        acc += a * b;
                    }
                    *r = acc;
                }
            });
            Ok(LayerRecord {
                output: out,
                aux: Aux::None,
            })
        }
        LayerKind::ResidualBlock { members } => {
            residual_forward(members, path, params, input, phase)
        }
        LayerKind::SoftmaxXent => {
            if input.rank() != 2 {
                return Err(mismatch(format!(
                    "softmax expects (n,classes), got {:?}",
                    input.shape()
                )));
            }
            let probs = softmax_rows(input);
            if let Some(y) = labels {
                let n = input.shape()[0];
                if y.len() != n {
                    return Err(mismatch(format!("{} labels for {n} samples", y.len())));
                }
                let classes = input.shape()[1];
                let mut total = 0.0;
                for (i, &label) in y.iter().enumerate() {
                    if label >= classes {
                        return Err(Error::LabelOutOfRange {
                            label: label as i64,
                            classes,
                        });
                    }
                    let p = probs.data()[i * classes + label];
                    // the clamp guards log(0) underflow; NaN must pass
                    // through untouched so divergence stays observable
                    total -= if p.is_nan() { f64::NAN } else { p.max(1e-300).ln() };
                }
                *loss = Some(total / n as f64);
            }
            Ok(LayerRecord {
                output: probs.clone(),
                aux: Aux::Softmax { probs },
            })
        }
    }
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (n, classes) = (logits.shape()[0], logits.shape()[1]);
    let src = logits.data();
    let mut out = Tensor::zeros(&[n, classes]);
    par::for_each_chunk_mut(out.data_mut(), classes, |i, row| {
        let x = &src[i * classes..(i + 1) * classes];
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (r, &v) in row.iter_mut().zip(x) {
            *r = (v - m).exp();
            z += *r;
        }
        for r in row.iter_mut() {
            *r /= z;
        }
    });
    out
}

pub(super) fn conv_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    c: &ConvSpec,
) -> Result<Tensor> {
    let (n, _ci, h, w) = shape4(input);
    let oh = super::conv_out(h, c.kernel, c.stride, c.padding)?;
    let ow = super::conv_out(w, c.kernel, c.stride, c.padding)?;
    let mut out = Tensor::zeros(&[n, c.out_channels, oh, ow]);
    let ind = input.data();
    let wd = weight.data();
    let (ci, k, s, p) = (c.in_channels, c.kernel, c.stride, c.padding);
    let per_sample_out = c.out_channels * oh * ow;
    let per_sample_in = ci * h * w;
    par::for_each_chunk_mut(out.data_mut(), per_sample_out, |sample, odata| {
        let x = &ind[sample * per_sample_in..(sample + 1) * per_sample_in];
        for o in 0..c.out_channels {
            let ochan = &mut odata[o * oh * ow..(o + 1) * oh * ow];
            if let Some(b) = bias {
                let bv = b.data()[o];
                ochan.iter_mut().for_each(|v| *v = bv);
            }
            for i in 0..ci {
                let xchan = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((o * ci + i) * k + ky) * k + kx];
                        accumulate_tap(ochan, xchan, wv, h, w, oh, ow, s, p, ky, kx);
                    }
                }
            }
        }
    });
    Ok(out)
}

/// out[oy,ox] += wv * x[oy*s+ky-p, ox*s+kx-p] over the in-bounds range.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_tap(
    out: &mut [f64],
    x: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    s: usize,
    p: usize,
    ky: usize,
    kx: usize,
) {
    let (oy0, oy1) = valid_range(h, oh, s, p, ky);
    let (ox0, ox1) = valid_range(w, ow, s, p, kx);
    for oy in oy0..oy1 {
        let iy = oy * s + ky - p;
        let xrow = &x[iy * w..(iy + 1) * w];
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        if s == 1 {
            let base = kx.wrapping_sub(p);
            for ox in ox0..ox1 {
                orow[ox] += wv * xrow[ox.wrapping_add(base)];
            }
        } else {
            for ox in ox0..ox1 {
                orow[ox] += wv * xrow[ox * s + kx - p];
            }
        }
    }
}

/// Output positions whose tap `o*s + k - p` lands inside `[0, extent)`.
#[inline]
pub(super) fn valid_range(extent: usize, out: usize, s: usize, p: usize, k: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = {
        let max_i = extent + p;
        if max_i <= k {
            0
        } else {
            (((max_i - k - 1) / s) + 1).min(out)
        }
    };
    (lo.min(hi), hi)
}

fn batchnorm_forward(
    input: &Tensor,
    path: &str,
    params: &ParamMap,
    phase: Phase,
) -> Result<LayerRecord> {
    let (n, c, h, w) = shape4(input);
    let gamma = params[&format!("{path}.gamma")].data();
    let beta = params[&format!("{path}.beta")].data();
    let spatial = h * w;
    let count = (n * spatial) as f64;

    let (mean, var) = match phase {
        Phase::Eval => (
            params[&format!("{path}.running_mean")].data().to_vec(),
            params[&format!("{path}.running_var")].data().to_vec(),
        ),
        Phase::Train | Phase::Calibrate => {
            let stats: Vec<(f64, f64)> = par::map_indexed(c, |ch| {
                let mut sum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for v in &input.data()[base..base + spatial] {
                        sum += v;
                    }
                }
                let mean = sum / count;
                let mut varsum = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for v in &input.data()[base..base + spatial] {
                        let d = v - mean;
                        varsum += d * d;
                    }
                }
                (mean, varsum / count)
            });
            (
                stats.iter().map(|x| x.0).collect(),
                stats.iter().map(|x| x.1).collect(),
            )
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = Tensor::zeros(input.shape());
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    par::for_each_chunk_mut(xhat.data_mut(), c * spatial, |sample, xh| {
        let x = &src[sample * c * spatial..(sample + 1) * c * spatial];
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            for j in 0..spatial {
                xh[ch * spatial + j] = (x[ch * spatial + j] - m) * is;
            }
        }
    });
    let xh = xhat.data();
    par::for_each_chunk_mut(out.data_mut(), c * spatial, |sample, o| {
        let base = sample * c * spatial;
        for ch in 0..c {
            let (g, b) = (gamma[ch], beta[ch]);
            for j in 0..spatial {
                o[ch * spatial + j] = g * xh[base + ch * spatial + j] + b;
            }
        }
    });

    Ok(LayerRecord {
        output: out,
        aux: Aux::BatchNorm {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    })
}

fn maxpool_forward(input: &Tensor, size: usize, stride: usize, path: &str) -> Result<LayerRecord> {
    let (n, c, h, w) = shape4(input);
    let oh = super::pool_out(h, size, stride).map_err(|e| Error::LayerMismatch {
        index: path.to_string(),
        detail: e.to_string(),
    })?;
    let ow = super::pool_out(w, size, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    let src = input.data();
    // serial over samples*channels to fill argmax alongside; the work is
    // trivial compared to convolutions
    for s in 0..n {
        for ch in 0..c {
            let x = &src[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let v = x[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    let oidx = ((s * c + ch) * oh + oy) * ow + ox;
                    out.data_mut()[oidx] = best;
                    argmax[oidx] = (s * c + ch) * h * w + best_idx;
                }
            }
        }
    }
    Ok(LayerRecord {
        output: out,
        aux: Aux::MaxPool {
            argmax,
            input_shape: input.shape().to_vec(),
        },
    })
}

fn avgpool_forward(input: &Tensor, size: usize, stride: usize, _path: &str) -> Result<LayerRecord> {
    let (n, c, h, w) = shape4(input);
    let oh = super::pool_out(h, size, stride)?;
    let ow = super::pool_out(w, size, stride)?;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let src = input.data();
    let norm = 1.0 / (size * size) as f64;
    par::for_each_chunk_mut(out.data_mut(), c * oh * ow, |s, odata| {
        for ch in 0..c {
            let x = &src[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..size {
                        let iy = oy * stride + ky;
                        for kx in 0..size {
                            acc += x[iy * w + ox * stride + kx];
                        }
                    }
                    odata[(ch * oh + oy) * ow + ox] = acc * norm;
                }
            }
        }
    });
    Ok(LayerRecord {
        output: out,
        aux: Aux::AvgPool {
            input_shape: input.shape().to_vec(),
        },
    })
}

fn residual_forward(
    members: &[LayerSpec],
    path: &str,
    params: &ParamMap,
    input: &Tensor,
    phase: Phase,
) -> Result<LayerRecord> {
    let mut inner = Vec::with_capacity(members.len());
    let mut ignored = None;
    run_chain(members, path, params, input, None, phase, &mut inner, &mut ignored)?;
    let body = inner.last().expect("non-empty block").output.clone();
    let shortcut = shortcut_map(input, body.shape()).map_err(|e| Error::LayerMismatch {
        index: path.to_string(),
        detail: e.to_string(),
    })?;
    let mut sum = body;
    for (s, v) in sum.data_mut().iter_mut().zip(shortcut.data()) {
        *s += v;
    }
    let mut output = sum.clone();
    output.data_mut().iter_mut().for_each(|x| {
        if *x < 0.0 {
            *x = 0.0
        }
    });
    Ok(LayerRecord {
        output,
        aux: Aux::Block { inner, sum },
    })
}

/// Identity shortcut: subsamples spatially when the block shrank the map
/// and zero-pads new channels at the tail.
pub(super) fn shortcut_map(input: &Tensor, target: &[usize]) -> Result<Tensor> {
    let (n, ci, h, w) = shape4(input);
    let (co, oh, ow) = (target[1], target[2], target[3]);
    if co < ci {
        return Err(Error::InvalidArgument(format!(
            "shortcut cannot shrink channels {ci} -> {co}"
        )));
    }
    if oh == 0 || h % oh != 0 || w % ow != 0 || h / oh != w / ow {
        return Err(Error::InvalidArgument(format!(
            "shortcut cannot map {h}x{w} onto {oh}x{ow}"
        )));
    }
    let f = h / oh;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let src = input.data();
    for s in 0..n {
        for ch in 0..ci {
            let x = &src[(s * ci + ch) * h * w..(s * ci + ch + 1) * h * w];
            let base = (s * co + ch) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    out.data_mut()[base + oy * ow + ox] = x[(oy * f) * w + ox * f];
                }
            }
        }
    }
    Ok(out)
}

#[inline]
pub(super) fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
