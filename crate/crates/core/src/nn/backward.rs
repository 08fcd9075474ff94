//! Reverse-mode gradients for every layer kind.
//!
//! Weight gradients are accumulated per output partition with fixed inner
//! loop order (samples ascending), so parallel and sequential builds agree
//! bitwise.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

use super::forward::{shape4, valid_range, Aux, ForwardPass, LayerRecord};
use super::{ConvSpec, LayerKind, LayerSpec, ModelSpec, ParamMap};

/// Raw per-parameter gradients for one mini-batch.
#[derive(Debug, Clone)]
pub struct GradientSnapshot {
    pub grads: ParamMap,
    pub batch_index: usize,
    pub loss: f64,
}

/// Gradients of the mean cross-entropy over the batch with respect to
/// every trainable parameter. Requires a forward pass whose terminal
/// layer was softmax-xent evaluated with labels.
pub fn backward(
    model: &ModelSpec,
    batch: &Tensor,
    labels: &[usize],
    pass: &ForwardPass,
) -> Result<GradientSnapshot> {
    let last = pass
        .records
        .last()
        .ok_or(Error::EmptyInput("backward on empty model"))?;
    let probs = match &last.aux {
        Aux::Softmax { probs } => probs,
        _ => {
            return Err(Error::InvalidArgument(
                "backward requires a softmax-xent terminal layer".into(),
            ))
        }
    };
    let loss = pass.loss.ok_or(Error::InvalidArgument(
        "backward requires a forward pass evaluated with labels".into(),
    ))?;

    let (n, classes) = (probs.shape()[0], probs.shape()[1]);
    let mut d = probs.scaled(1.0 / n as f64);
    for (i, &y) in labels.iter().enumerate() {
        d.data_mut()[i * classes + y] -= 1.0 / n as f64;
    }

    let mut grads = ParamMap::new();
    let l = model.layers.len();
    backward_chain(
        &model.layers[..l - 1],
        "",
        &model.params,
        batch,
        &pass.records[..l - 1],
        d,
        &mut grads,
    )?;
    Ok(GradientSnapshot {
        grads,
        batch_index: 0,
        loss,
    })
}

fn backward_chain(
    layers: &[LayerSpec],
    prefix: &str,
    params: &ParamMap,
    chain_input: &Tensor,
    records: &[LayerRecord],
    mut d: Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    for i in (0..layers.len()).rev() {
        let path = super::join_path(prefix, i);
        let input = if i == 0 {
            chain_input
        } else {
            &records[i - 1].output
        };
        d = layer_backward(&layers[i], &path, params, input, &records[i], d, grads)?;
    }
    Ok(d)
}

fn layer_backward(
    spec: &LayerSpec,
    path: &str,
    params: &ParamMap,
    input: &Tensor,
    record: &LayerRecord,
    d_out: Tensor,
    grads: &mut ParamMap,
) -> Result<Tensor> {
    match &spec.kind {
        LayerKind::Conv(c) => {
            let weight = &params[&format!("{path}.weight")];
            let (d_in, d_w) = conv_backward(input, weight, c, &d_out);
            grads.insert(format!("{path}.weight"), d_w);
            if c.bias {
                let (n, co, oh, ow) = shape4(&d_out);
                let mut d_b = Tensor::zeros(&[co]);
                for s in 0..n {
                    for o in 0..co {
                        let base = (s * co + o) * oh * ow;
                        let sum: f64 = d_out.data()[base..base + oh * ow].iter().sum();
                        d_b.data_mut()[o] += sum;
                    }
                }
                grads.insert(format!("{path}.bias"), d_b);
            }
            Ok(d_in)
        }
        LayerKind::BatchNorm { channels } => {
            let gamma = params[&format!("{path}.gamma")].data();
            let (xhat, inv_std) = match &record.aux {
                Aux::BatchNorm { xhat, inv_std, .. } => (xhat, inv_std),
                _ => unreachable!("batchnorm record"),
            };
            let (n, c, h, w) = shape4(input);
            debug_assert_eq!(c, *channels);
            let spatial = h * w;
            let m = (n * spatial) as f64;

            let sums: Vec<(f64, f64)> = par::map_indexed(c, |ch| {
                let mut s_d = 0.0;
                let mut s_dx = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for j in 0..spatial {
                        let g = d_out.data()[base + j];
                        s_d += g;
                        s_dx += g * xhat.data()[base + j];
                    }
                }
                (s_d, s_dx)
            });
            let d_beta: Vec<f64> = sums.iter().map(|x| x.0).collect();
            let d_gamma: Vec<f64> = sums.iter().map(|x| x.1).collect();

            let mut d_in = Tensor::zeros(input.shape());
            let dod = d_out.data();
            let xhd = xhat.data();
            par::for_each_chunk_mut(d_in.data_mut(), c * spatial, |s, chunk| {
                let base = s * c * spatial;
                for ch in 0..c {
                    let k = gamma[ch] * inv_std[ch];
                    let mb = d_beta[ch] / m;
                    let mg = d_gamma[ch] / m;
                    for j in 0..spatial {
                        let idx = ch * spatial + j;
                        chunk[idx] = k * (dod[base + idx] - mb - xhd[base + idx] * mg);
                    }
                }
            });
            grads.insert(
                format!("{path}.gamma"),
                Tensor::from_vec(&[c], d_gamma).unwrap(),
            );
            grads.insert(
                format!("{path}.beta"),
                Tensor::from_vec(&[c], d_beta).unwrap(),
            );
            Ok(d_in)
        }
        LayerKind::Relu => Ok(relu_backward(&record.output, d_out)),
        LayerKind::MaxPool { .. } => {
            let (argmax, input_shape) = match &record.aux {
                Aux::MaxPool {
                    argmax,
                    input_shape,
                } => (argmax, input_shape),
                _ => unreachable!("maxpool record"),
            };
            let mut d_in = Tensor::zeros(input_shape);
            for (oidx, &iidx) in argmax.iter().enumerate() {
                d_in.data_mut()[iidx] += d_out.data()[oidx];
            }
            Ok(d_in)
        }
        LayerKind::AvgPool { size, stride } => {
            let input_shape = match &record.aux {
                Aux::AvgPool { input_shape } => input_shape,
                _ => unreachable!("avgpool record"),
            };
            let (c, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
            let (_, _, oh, ow) = shape4(&d_out);
            let norm = 1.0 / (size * size) as f64;
            let mut d_in = Tensor::zeros(input_shape);
            let dod = d_out.data();
            par::for_each_chunk_mut(d_in.data_mut(), c * h * w, |s, chunk| {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dod[((s * c + ch) * oh + oy) * ow + ox] * norm;
                            for ky in 0..*size {
                                let iy = oy * stride + ky;
                                for kx in 0..*size {
                                    chunk[(ch * h + iy) * w + ox * stride + kx] += g;
                                }
                            }
                        }
                    }
                }
            });
            Ok(d_in)
        }
        LayerKind::Flatten => {
            let input_shape = match &record.aux {
                Aux::Flatten { input_shape } => input_shape.clone(),
                _ => unreachable!("flatten record"),
            };
            d_out.reshape(&input_shape)
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let weight = &params[&format!("{path}.weight")];
            let (fi, fo) = (*in_features, *out_features);
            let n = input.shape()[0];
            let (xd, wd, dod) = (input.data(), weight.data(), d_out.data());

            let mut d_w = Tensor::zeros(&[fo, fi]);
            par::for_each_chunk_mut(d_w.data_mut(), fi, |o, row| {
                for s in 0..n {
                    let g = dod[s * fo + o];
                    if g == 0.0 {
                        continue;
                    }
                    let x = &xd[s * fi..(s + 1) * fi];
                    for (r, &xv) in row.iter_mut().zip(x) {
                        *r += g * xv;
                    }
                }
            });
            let mut d_b = Tensor::zeros(&[fo]);
            for s in 0..n {
                for o in 0..fo {
                    d_b.data_mut()[o] += dod[s * fo + o];
                }
            }
            let mut d_in = Tensor::zeros(&[n, fi]);
            par::for_each_chunk_mut(d_in.data_mut(), fi, |s, row| {
                for o in 0..fo {
                    let g = dod[s * fo + o];
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &wd[o * fi..(o + 1) * fi];
                    for (r, &wv) in row.iter_mut().zip(wrow) {
                        *r += g * wv;
                    }
                }
            });
            grads.insert(format!("{path}.weight"), d_w);
            grads.insert(format!("{path}.bias"), d_b);
            Ok(d_in)
        }
        LayerKind::ResidualBlock { members } => {
            let (inner, _sum) = match &record.aux {
                Aux::Block { inner, sum } => (inner, sum),
                _ => unreachable!("block record"),
            };
            // through the trailing relu of the block
            let d_sum = relu_backward(&record.output, d_out);
            let d_body = backward_chain(members, path, params, input, inner, d_sum.clone(), grads)?;

            // shortcut: truncate padded channels, scatter over the stride grid
            let (n, ci, h, w) = shape4(input);
            let (_, co, oh, ow) = shape4(&d_sum);
            let f = h / oh;
            let mut d_in = d_body;
            let dsd = d_sum.data();
            for s in 0..n {
                for ch in 0..ci.min(co) {
                    let src_base = (s * co + ch) * oh * ow;
                    let dst_base = (s * ci + ch) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            d_in.data_mut()[dst_base + (oy * f) * w + ox * f] +=
                                dsd[src_base + oy * ow + ox];
                        }
                    }
                }
            }
            Ok(d_in)
        }
        LayerKind::SoftmaxXent => Err(Error::InvalidArgument(
            "softmax-xent must be the terminal layer".into(),
        )),
    }
}

fn relu_backward(output: &Tensor, mut d_out: Tensor) -> Tensor {
    for (d, &o) in d_out.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    d_out
}

/// Gradients of a convolution with respect to its input and weights.
fn conv_backward(input: &Tensor, weight: &Tensor, c: &ConvSpec, d_out: &Tensor) -> (Tensor, Tensor) {
    let (n, ci, h, w) = shape4(input);
    let (_, co, oh, ow) = shape4(d_out);
    let (k, s, p) = (c.kernel, c.stride, c.padding);
    let wd = weight.data();
    let dod = d_out.data();
    let ind = input.data();

    let mut d_in = Tensor::zeros(input.shape());
    par::for_each_chunk_mut(d_in.data_mut(), ci * h * w, |sample, chunk| {
        let dz = &dod[sample * co * oh * ow..(sample + 1) * co * oh * ow];
        for o in 0..co {
            let dchan = &dz[o * oh * ow..(o + 1) * oh * ow];
            for i in 0..ci {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wd[((o * ci + i) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (oy0, oy1) = valid_range(h, oh, s, p, ky);
                        let (ox0, ox1) = valid_range(w, ow, s, p, kx);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let drow = &dchan[oy * ow..(oy + 1) * ow];
                            let irow = &mut chunk[(i * h + iy) * w..(i * h + iy + 1) * w];
                            for ox in ox0..ox1 {
                                irow[ox * s + kx - p] += wv * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut d_w = Tensor::zeros(weight.shape());
    let per_filter = ci * k * k;
    par::for_each_chunk_mut(d_w.data_mut(), per_filter, |o, wchunk| {
        for sample in 0..n {
            let dchan =
                &dod[(sample * co + o) * oh * ow..(sample * co + o + 1) * oh * ow];
            let x = &ind[sample * ci * h * w..(sample + 1) * ci * h * w];
            for i in 0..ci {
                let xchan = &x[i * h * w..(i + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let (oy0, oy1) = valid_range(h, oh, s, p, ky);
                        let (ox0, ox1) = valid_range(w, ow, s, p, kx);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let drow = &dchan[oy * ow..(oy + 1) * ow];
                            let xrow = &xchan[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                acc += drow[ox] * xrow[ox * s + kx - p];
                            }
                        }
                        wchunk[(i * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });

    (d_in, d_w)
}
