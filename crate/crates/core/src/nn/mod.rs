//! Declarative CNN construction, forward/backward passes, SGD training
//! and model statistics.
//!
//! A [`ModelSpec`] is a list of [`LayerSpec`]s plus a parameter store keyed
//! by layer path (`"3.weight"`, `"6.0.gamma"`, ...). Parameters are plain
//! tensors; the forward and backward passes walk the layer list, so model
//! surgery is just list editing plus re-initialization.

mod backward;
mod forward;
pub mod presets;
mod train;


pub use backward::{backward, GradientSnapshot};
pub use forward::{forward, Aux, ForwardPass, LayerRecord, Phase};
pub use train::{
    capture_gradient_matrices, evaluate, train, train_epochs, Augmentation, OptimizerState,
    TrainConfig, TrainLog,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type ParamMap = BTreeMap<String, Tensor>;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    BatchNorm { channels: usize },
    Relu,
    MaxPool { size: usize, stride: usize },
    AvgPool { size: usize, stride: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize },
    /// Members run as a chain; the input joins their output through an
    /// identity shortcut (stride-subsampled and zero-padded on channel
    /// increase) followed by a ReLU.
    ResidualBlock { members: Vec<LayerSpec> },
    /// Terminal layer: softmax over logits, cross-entropy against labels.
    SoftmaxXent,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub prunable: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            prunable: false,
        }
    }

    pub fn prunable(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            prunable: true,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::new(LayerKind::Conv(ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            bias: false,
        }))
    }
}

/// Architecture + parameters + the seed the parameters were drawn from.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub params: ParamMap,
    pub seed: u64,
}

/// Serializable architecture descriptor (no parameter payloads).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ArchDescriptor {
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl ModelSpec {
    /// Builds the model and draws fresh parameters from `seed`.
    pub fn build(layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        validate_channel_chain(&layers)?;
        let mut params = ParamMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&layers, "", &mut params, &mut rng)?;
        Ok(ModelSpec {
            layers,
            params,
            seed,
        })
    }

    pub fn from_descriptor(desc: &ArchDescriptor) -> Result<Self> {
        ModelSpec::build(desc.layers.clone(), desc.seed)
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor {
            layers: self.layers.clone(),
            seed: self.seed,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        for spec in self.layers.iter().rev() {
            if let LayerKind::Linear { out_features, .. } = spec.kind {
                return Some(out_features);
            }
        }
        None
    }

    /// Trainable parameter keys in deterministic order.
    pub fn trainable_keys(&self) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| is_trainable_key(k))
            .cloned()
            .collect()
    }

    /// Paths of prunable conv layers in traversal order, with their
    /// output channel counts.
    pub fn prunable_convs(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        collect_prunable(&self.layers, "", &mut out);
        out
    }

    /// Looks a layer up by path (`"3"` or `"4.1"`).
    pub fn layer_at(&self, path: &str) -> Option<&LayerSpec> {
        let mut parts = path.split('.');
        let top: usize = parts.next()?.parse().ok()?;
        let spec = self.layers.get(top)?;
        match parts.next() {
            None => Some(spec),
            Some(sub) => {
                let idx: usize = sub.parse().ok()?;
                match &spec.kind {
                    LayerKind::ResidualBlock { members } => members.get(idx),
                    _ => None,
                }
            }
        }
    }
}

pub fn is_trainable_key(key: &str) -> bool {
    key.ends_with(".weight")
        || key.ends_with(".bias")
        || key.ends_with(".gamma")
        || key.ends_with(".beta")
}

fn collect_prunable(layers: &[LayerSpec], prefix: &str, out: &mut Vec<(String, usize)>) {
    for (i, spec) in layers.iter().enumerate() {
        let path = join_path(prefix, i);
        match &spec.kind {
            LayerKind::Conv(c) if spec.prunable => out.push((path, c.out_channels)),
            LayerKind::ResidualBlock { members } => collect_prunable(members, &path, out),
            _ => {}
        }
    }
}

pub(crate) fn join_path(prefix: &str, i: usize) -> String {
    if prefix.is_empty() {
        i.to_string()
    } else {
        format!("{prefix}.{i}")
    }
}

fn init_params(
    layers: &[LayerSpec],
    prefix: &str,
    params: &mut ParamMap,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    for (i, spec) in layers.iter().enumerate() {
        let path = join_path(prefix, i);
        match &spec.kind {
            LayerKind::Conv(c) => {
                let fan_in = c.in_channels * c.kernel * c.kernel;
                let w = kaiming(
                    &[c.out_channels, c.in_channels, c.kernel, c.kernel],
                    fan_in,
                    rng,
                );
                params.insert(format!("{path}.weight"), w);
                if c.bias {
                    params.insert(format!("{path}.bias"), Tensor::zeros(&[c.out_channels]));
                }
            }
            LayerKind::BatchNorm { channels } => {
                params.insert(format!("{path}.gamma"), Tensor::filled(&[*channels], 1.0));
                params.insert(format!("{path}.beta"), Tensor::zeros(&[*channels]));
                params.insert(
                    format!("{path}.running_mean"),
                    Tensor::zeros(&[*channels]),
                );
                params.insert(
                    format!("{path}.running_var"),
                    Tensor::filled(&[*channels], 1.0),
                );
            }
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                let w = kaiming(&[*out_features, *in_features], *in_features, rng);
                params.insert(format!("{path}.weight"), w);
                params.insert(format!("{path}.bias"), Tensor::zeros(&[*out_features]));
            }
            LayerKind::ResidualBlock { members } => {
                init_params(members, &path, params, rng)?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn kaiming(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Checks that channel counts line up along the conv/BN chain. Spatial
/// agreement is checked at forward time against the actual batch.
fn validate_channel_chain(layers: &[LayerSpec]) -> Result<()> {
    fn walk(layers: &[LayerSpec], prefix: &str, mut channels: Option<usize>) -> Result<Option<usize>> {
        for (i, spec) in layers.iter().enumerate() {
            let path = join_path(prefix, i);
            match &spec.kind {
                LayerKind::Conv(c) => {
                    if let Some(ch) = channels {
                        if ch != c.in_channels {
                            return Err(Error::LayerMismatch {
                                index: path,
                                detail: format!(
                                    "expects {} input channels, producer emits {ch}",
                                    c.in_channels
                                ),
                            });
                        }
                    }
                    channels = Some(c.out_channels);
                }
                LayerKind::BatchNorm { channels: bc } => {
                    if let Some(ch) = channels {
                        if ch != *bc {
                            return Err(Error::LayerMismatch {
                                index: path,
                                detail: format!("normalizes {bc} channels, producer emits {ch}"),
                            });
                        }
                    }
                }
                LayerKind::ResidualBlock { members } => {
                    let out = walk(members, &path, channels)?;
                    if let (Some(cin), Some(cout)) = (channels, out) {
                        if cout < cin {
                            return Err(Error::LayerMismatch {
                                index: path,
                                detail: format!(
                                    "shortcut cannot shrink channels ({cin} -> {cout})"
                                ),
                            });
                        }
                    }
                    channels = out;
                }
                LayerKind::Flatten | LayerKind::Linear { .. } => {
                    // channel bookkeeping ends at the classifier head
                    channels = None;
                }
                _ => {}
            }
        }
        Ok(channels)
    }
    walk(layers, "", None).map(|_| ())
}

/// Static model accounting: prunable filters, exact trainable parameter
/// count and multiply-accumulate count for one input of `input_shape`
/// (channels, height, width). One MAC counts as one FLOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub filters: usize,
    pub parameters: usize,
    pub flops: usize,
}

pub fn model_stats(model: &ModelSpec, input_shape: (usize, usize, usize)) -> Result<ModelStats> {
    let filters = model.prunable_convs().iter().map(|(_, c)| c).sum();
    let parameters = model
        .params
        .iter()
        .filter(|(k, _)| is_trainable_key(k))
        .map(|(_, t)| t.len())
        .sum();
    let flops = flops_of(&model.layers, input_shape)?;
    Ok(ModelStats {
        filters,
        parameters,
        flops,
    })
}

fn flops_of(layers: &[LayerSpec], input: (usize, usize, usize)) -> Result<usize> {
    let (mut c, mut h, mut w) = input;
    let mut macs = 0usize;
    for spec in layers {
        match &spec.kind {
            LayerKind::Conv(cv) => {
                let oh = conv_out(h, cv.kernel, cv.stride, cv.padding)?;
                let ow = conv_out(w, cv.kernel, cv.stride, cv.padding)?;
                macs += cv.kernel * cv.kernel * cv.in_channels * cv.out_channels * oh * ow;
                c = cv.out_channels;
                h = oh;
                w = ow;
            }
            LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                h = pool_out(h, *size, *stride)?;
                w = pool_out(w, *size, *stride)?;
            }
            LayerKind::Flatten => {}
            LayerKind::Linear {
                in_features,
                out_features,
            } => {
                macs += in_features * out_features;
            }
            LayerKind::ResidualBlock { members } => {
                let inner = flops_of(members, (c, h, w))?;
                macs += inner;
                let (oc, oh, ow) = chain_shape(members, (c, h, w))?;
                c = oc;
                h = oh;
                w = ow;
            }
            _ => {}
        }
    }
    Ok(macs)
}

pub(crate) fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "convolution does not fit: extent {extent}, kernel {kernel}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

pub(crate) fn pool_out(extent: usize, size: usize, stride: usize) -> Result<usize> {
    if extent < size || stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "pool window {size} does not fit extent {extent}"
        )));
    }
    Ok((extent - size) / stride + 1)
}

/// Output shape of a layer chain given an input shape.
pub fn chain_shape(
    layers: &[LayerSpec],
    input: (usize, usize, usize),
) -> Result<(usize, usize, usize)> {
    let (mut c, mut h, mut w) = input;
    for spec in layers {
        match &spec.kind {
            LayerKind::Conv(cv) => {
                c = cv.out_channels;
                h = conv_out(h, cv.kernel, cv.stride, cv.padding)?;
                w = conv_out(w, cv.kernel, cv.stride, cv.padding)?;
            }
            LayerKind::MaxPool { size, stride } | LayerKind::AvgPool { size, stride } => {
                h = pool_out(h, *size, *stride)?;
                w = pool_out(w, *size, *stride)?;
            }
            LayerKind::ResidualBlock { members } => {
                let (oc, oh, ow) = chain_shape(members, (c, h, w))?;
                c = oc;
                h = oh;
                w = ow;
            }
            LayerKind::Flatten | LayerKind::Linear { .. } | LayerKind::SoftmaxXent => {}
            _ => {}
        }
    }
    Ok((c, h, w))
}
