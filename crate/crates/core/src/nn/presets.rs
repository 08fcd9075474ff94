//! Stock architectures.

use crate::error::Result;

use super::{ConvSpec, LayerKind, LayerSpec, ModelSpec};

fn conv_bn_relu(layers: &mut Vec<LayerSpec>, cin: usize, cout: usize, prunable: bool) {
    let mut conv = LayerSpec::conv(cin, cout, 3);
    conv.prunable = prunable;
    layers.push(conv);
    layers.push(LayerSpec::new(LayerKind::BatchNorm { channels: cout }));
    layers.push(LayerSpec::new(LayerKind::Relu));
}

/// 13 conv layers + 1 fully connected layer, batch norm before every
/// activation, built for 32x32 RGB inputs and 10 classes.
pub fn vgg_a(seed: u64) -> Result<ModelSpec> {
    vgg_with_channels(
        &[64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512],
        3,
        10,
        seed,
    )
}

/// VGG-A shape with custom channel widths; pools follow the 2-2-3-3-3
/// block layout, so 13 entries are expected.
pub fn vgg_with_channels(
    channels: &[usize; 13],
    in_channels: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let mut cin = in_channels;
    let pool_after = [1usize, 3, 6, 9, 12];
    for (i, &cout) in channels.iter().enumerate() {
        conv_bn_relu(&mut layers, cin, cout, true);
        if pool_after.contains(&i) {
            layers.push(LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }));
        }
        cin = cout;
    }
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Linear {
        in_features: cin,
        out_features: classes,
    }));
    layers.push(LayerSpec::new(LayerKind::SoftmaxXent));
    ModelSpec::build(layers, seed)
}

fn residual_block(cin: usize, cout: usize, stride: usize) -> LayerSpec {
    let first = LayerSpec::prunable(LayerKind::Conv(ConvSpec {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride,
        padding: 1,
        bias: false,
    }));
    // only the first conv of a block is a pruning target; the second
    // restores the block width for the shortcut sum
    let members = vec![
        first,
        LayerSpec::new(LayerKind::BatchNorm { channels: cout }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::Conv(ConvSpec {
            in_channels: cout,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            padding: 1,
            bias: false,
        })),
        LayerSpec::new(LayerKind::BatchNorm { channels: cout }),
    ];
    LayerSpec::new(LayerKind::ResidualBlock { members })
}

/// Three stages of residual blocks (widths 16/32/64) over 32x32 inputs.
/// `blocks_per_stage = 9` gives the 56-layer configuration.
pub fn resnet_cifar(blocks_per_stage: usize, seed: u64) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    conv_bn_relu(&mut layers, 3, 16, false);
    let widths = [16usize, 32, 64];
    let mut cin = 16;
    for (stage, &width) in widths.iter().enumerate() {
        for b in 0..blocks_per_stage {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(residual_block(cin, width, stride));
            cin = width;
        }
    }
    layers.push(LayerSpec::new(LayerKind::AvgPool { size: 8, stride: 8 }));
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Linear {
        in_features: 64,
        out_features: 10,
    }));
    layers.push(LayerSpec::new(LayerKind::SoftmaxXent));
    ModelSpec::build(layers, seed)
}

pub fn resnet56(seed: u64) -> Result<ModelSpec> {
    resnet_cifar(9, seed)
}

/// Six prunable conv layers sized for small inputs; pooling stages are
/// skipped when the spatial extent cannot support them.
pub fn tiny_cnn(
    in_channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelSpec> {
    let mut layers = Vec::new();
    let widths = [8usize, 8, 16, 16, 32, 32];
    let mut cin = in_channels;
    let (mut h, mut w) = (height, width);
    for (i, &cout) in widths.iter().enumerate() {
        conv_bn_relu(&mut layers, cin, cout, true);
        cin = cout;
        if (i == 1 || i == 3) && h >= 2 && w >= 2 {
            layers.push(LayerSpec::new(LayerKind::MaxPool { size: 2, stride: 2 }));
            h /= 2;
            w /= 2;
        }
    }
    if h > 1 || w > 1 {
        layers.push(LayerSpec::new(LayerKind::AvgPool {
            size: h.min(w),
            stride: h.min(w),
        }));
        h = 1;
        w = 1;
    }
    let _ = (h, w);
    layers.push(LayerSpec::new(LayerKind::Flatten));
    layers.push(LayerSpec::new(LayerKind::Linear {
        in_features: cin,
        out_features: classes,
    }));
    layers.push(LayerSpec::new(LayerKind::SoftmaxXent));
    ModelSpec::build(layers, seed)
}

/// Small multilayer perceptron over flattened inputs, for sanity runs on
/// low-dimensional synthetic data.
pub fn mlp(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Result<ModelSpec> {
    let layers = vec![
        LayerSpec::new(LayerKind::Flatten),
        LayerSpec::new(LayerKind::Linear {
            in_features: inputs,
            out_features: hidden,
        }),
        LayerSpec::new(LayerKind::Relu),
        LayerSpec::new(LayerKind::Linear {
            in_features: hidden,
            out_features: classes,
        }),
        LayerSpec::new(LayerKind::SoftmaxXent),
    ];
    ModelSpec::build(layers, seed)
}
