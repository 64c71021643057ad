//! Convolution geometry and parameter counting.

use crate::error::{Error, Result};
use crate::nn::layers::LayerSpec;

/// `O = floor((N - K + 2P) / S) + 1`
pub fn output_size(input: usize, kernel: usize, padding: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Geometry("stride must be at least 1".into()));
    }
    if kernel == 0 {
        return Err(Error::Geometry("kernel must be at least 1".into()));
    }
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Geometry(format!(
            "kernel {kernel} does not fit input {input} with padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Receptive extent of a dilated kernel: `W + (W - 1)(D - 1)`.
pub fn effective_window(kernel: usize, dilation: usize) -> usize {
    kernel + (kernel.saturating_sub(1)) * dilation.saturating_sub(1)
}

pub fn param_count(spec: &LayerSpec) -> usize {
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            ..
        } => out_channels * kernel[0] * kernel[1] * in_channels + out_channels,
        LayerSpec::BatchNorm2d { channels } => 2 * channels,
        LayerSpec::Linear {
            in_features,
            out_features,
        } => out_features * in_features + out_features,
        LayerSpec::Relu | LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten | LayerSpec::Dropout { .. } => 0,
    }
}
