//! The concrete architecture tables.
//!
//! Every 3x3 CIFAR-10 convolution uses padding 1: the tables print padding 0
//! next to size-preserving outputs, and only padding 1 produces those sizes.

use crate::nn::LayerKind::{Conv, ConvBNLReLU, ConvBNReLU, ConvReLU};
use crate::nn::LayerSpec;

/// Feature-vector lengths of the four CIFAR-10 reducers.
pub const CIFAR_FEATURE_LENS: [usize; 4] = [64, 96, 128, 128];

pub fn mnist_baseline() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(ConvReLU, 1, 5, 5, 1, 0),
        LayerSpec::maxpool(2, 2),
        LayerSpec::conv(ConvReLU, 5, 5, 5, 1, 0),
        LayerSpec::maxpool(2, 2),
        LayerSpec::linear(80, 10),
    ]
}

pub fn mnist_encoder(n: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(ConvBNLReLU, 1, n, 5, 1, 2),
        LayerSpec::conv(ConvBNLReLU, n, n, 5, 2, 2),
    ]
}

/// Ends in raw logits; the model applies the logistic function.
pub fn mnist_decoder(n: usize) -> Vec<LayerSpec> {
    vec![LayerSpec::upsample(2), LayerSpec::conv(Conv, n, 1, 5, 1, 2)]
}

/// Reducer for encoder tap `tap` (0 or 1): 28x28 or 14x14 down to 1x1.
pub fn mnist_reducer(tap: usize, n: usize) -> Vec<LayerSpec> {
    let first = if tap == 0 { 4 } else { 2 };
    vec![
        LayerSpec::conv(ConvBNLReLU, n, n, first, first, 0),
        LayerSpec::conv(ConvBNLReLU, n, n, 3, 3, 1),
        LayerSpec::conv(ConvBNLReLU, n, n, 3, 1, 0),
        LayerSpec::linear_lrelu(n, n),
    ]
}

pub fn cifar_baseline() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(ConvBNReLU, 3, 64, 3, 1, 1),
        LayerSpec::conv(ConvBNReLU, 64, 128, 3, 2, 1),
        LayerSpec::conv(ConvBNReLU, 128, 256, 3, 2, 1),
        LayerSpec::conv(ConvBNReLU, 256, 256, 3, 2, 1),
        LayerSpec::avgpool(4, 1),
        LayerSpec::linear(256, 10),
    ]
}

pub fn cifar_encoder() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(ConvBNReLU, 3, 64, 3, 1, 1),
        LayerSpec::conv(ConvBNReLU, 64, 96, 3, 2, 1),
        LayerSpec::conv(ConvBNReLU, 96, 128, 3, 2, 1),
        LayerSpec::conv(ConvBNReLU, 128, 128, 3, 2, 1),
    ]
}

/// Back up to 32x32x3 (the table's last row reads 64x64x3, which cannot
/// come out of a 32x32 input with these layers).
pub fn cifar_decoder() -> Vec<LayerSpec> {
    vec![
        LayerSpec::upsample(2),
        LayerSpec::conv(ConvBNReLU, 128, 128, 3, 1, 1),
        LayerSpec::upsample(2),
        LayerSpec::conv(ConvBNReLU, 128, 96, 3, 1, 1),
        LayerSpec::upsample(2),
        LayerSpec::conv(ConvBNReLU, 96, 96, 3, 1, 1),
        LayerSpec::conv(Conv, 96, 3, 3, 1, 1),
    ]
}

pub fn cifar_reducer(tap: usize) -> Vec<LayerSpec> {
    let c = CIFAR_FEATURE_LENS[tap];
    let conv = |k, s| LayerSpec::conv(ConvBNLReLU, c, c, k, s, 0);
    let mut specs = match tap {
        0 => vec![conv(4, 4), conv(4, 4), conv(2, 1)],
        1 => vec![conv(4, 4), conv(4, 1)],
        2 => vec![conv(4, 4), conv(2, 1)],
        _ => vec![conv(4, 1)],
    };
    specs.push(LayerSpec::linear_lrelu(c, c));
    specs
}
