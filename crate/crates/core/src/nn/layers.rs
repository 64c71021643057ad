//! Layer kinds and their forward/backward passes.
//!
//! Every layer works on a batch: the leading tensor dimension is the batch,
//! the rest is the per-sample shape (`[C, H, W]` for spatial layers,
//! `[N]` after flattening). Forward in `Train` or `Frozen` mode caches
//! whatever backward needs; backward consumes the cache.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, MatRef};
use crate::nn::shape::output_size;
use crate::nn::tensor::{Param, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout active, activations recorded.
    Train,
    /// Running statistics, no dropout, nothing recorded.
    Eval,
    /// Same function as `Eval`, but activations are recorded so gradients
    /// can flow through the inference-time network.
    Frozen,
}

impl Mode {
    pub fn records(self) -> bool {
        self != Mode::Eval
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    BatchNorm2d {
        channels: usize,
    },
    Relu,
    MaxPool2d {
        kernel: [usize; 2],
        stride: [usize; 2],
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    /// Square kernel, stride and padding.
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel: [kernel; 2],
            stride: [stride; 2],
            padding: [padding; 2],
        }
    }

    pub fn pool(size: usize) -> Self {
        LayerSpec::MaxPool2d {
            kernel: [size; 2],
            stride: [size; 2],
        }
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        LayerSpec::Linear {
            in_features,
            out_features,
        }
    }

    /// Name used in summaries, e.g. `Conv2d`.
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "Conv2d",
            LayerSpec::BatchNorm2d { .. } => "BatchNorm2d",
            LayerSpec::Relu => "ReLU",
            LayerSpec::MaxPool2d { .. } => "MaxPool2d",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Linear { .. } => "Linear",
            LayerSpec::Dropout { .. } => "Dropout",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, v: usize| {
            if v == 0 {
                Err(Error::Parameter(format!("{}: {what} must be positive", self.kind_name())))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel", kernel[0].min(kernel[1]))?;
                positive("stride", stride[0].min(stride[1]))
            }
            LayerSpec::BatchNorm2d { channels } => positive("channels", channels),
            LayerSpec::MaxPool2d { kernel, stride } => {
                positive("kernel", kernel[0].min(kernel[1]))?;
                positive("stride", stride[0].min(stride[1]))
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |what: &str| -> Result<[usize; 3]> {
            match *input {
                [c, h, w] => Ok([c, h, w]),
                _ => Err(Error::Dimension(format!("{what} expects [C, H, W], got {input:?}"))),
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [c, h, w] = spatial("Conv2d")?;
                if c != in_channels {
                    return Err(Error::Dimension(format!(
                        "Conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    output_size(h, kernel[0], padding[0], stride[0])?,
                    output_size(w, kernel[1], padding[1], stride[1])?,
                ])
            }
            LayerSpec::BatchNorm2d { channels } => {
                let [c, h, w] = spatial("BatchNorm2d")?;
                if c != channels {
                    return Err(Error::Dimension(format!(
                        "BatchNorm2d expects {channels} channels, got {c}"
                    )));
                }
                Ok(vec![c, h, w])
            }
            LayerSpec::MaxPool2d { kernel, stride } => {
                let [c, h, w] = spatial("MaxPool2d")?;
                Ok(vec![
                    c,
                    output_size(h, kernel[0], 0, stride[0])?,
                    output_size(w, kernel[1], 0, stride[1])?,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match *input {
                [n] if n == in_features => Ok(vec![out_features]),
                _ => Err(Error::Dimension(format!(
                    "Linear expects [{in_features}], got {input:?}"
                ))),
            },
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        }
    }
}

pub(crate) trait Layer: Send {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;
    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    /// Everything a checkpoint must hold: parameter values, then running statistics.
    fn state(&self) -> Vec<&Tensor> {
        self.params().into_iter().map(|p| &p.value).collect()
    }
    fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut().into_iter().map(|p| &mut p.value).collect()
    }
    fn reseed(&mut self, _seed: u64) {}
    fn clone_box(&self) -> Box<dyn Layer>;
}

fn no_cache(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a recorded forward"))
}

/// He-uniform initialisation over the fan-in.
fn kaiming_uniform(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

pub(crate) fn build_layer(spec: &LayerSpec, rng: &mut ChaCha8Rng) -> Result<Box<dyn Layer>> {
    spec.validate()?;
    Ok(match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } => {
            let fan_in = in_channels * kernel[0] * kernel[1];
            let weight = Tensor::new(
                vec![out_channels, in_channels, kernel[0], kernel[1]],
                kaiming_uniform(rng, out_channels * fan_in, fan_in),
            )?;
            Box::new(Conv2d {
                weight: Param::new(weight),
                bias: Param::new(Tensor::zeros(vec![out_channels])),
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                cache: None,
            })
        }
        LayerSpec::BatchNorm2d { channels } => Box::new(BatchNorm2d::new(channels)),
        LayerSpec::Relu => Box::new(Relu { mask: None }),
        LayerSpec::MaxPool2d { kernel, stride } => Box::new(MaxPool2d {
            kernel,
            stride,
            cache: None,
        }),
        LayerSpec::Flatten => Box::new(Flatten { input_shape: None }),
        LayerSpec::Linear {
            in_features,
            out_features,
        } => Box::new(Linear::new(in_features, out_features, rng)),
        LayerSpec::Dropout { rate } => Box::new(Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(rng.random()),
            mask: None,
        }),
    })
}

fn expect_spatial(input: &Tensor, layer: &str) -> Result<[usize; 4]> {
    match *input.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref other => Err(Error::Dimension(format!(
            "{layer} expects [B, C, H, W], got {other:?}"
        ))),
    }
}

struct ConvCache {
    cols: Vec<f64>,
    input_shape: [usize; 4],
    out_hw: [usize; 2],
}

pub(crate) struct Conv2d {
    weight: Param,
    bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    cache: Option<ConvCache>,
}

impl Conv2d {
    /// Unfolds every receptive field into a column: `[C·kh·kw, B·Ho·Wo]`.
    fn im2col(&self, input: &Tensor, ho: usize, wo: usize) -> Vec<f64> {
        let [b, c, h, w] = expect_spatial(input, "Conv2d").expect("checked by caller");
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let [ph, pw] = self.padding;
        let positions = ho * wo;
        let n_cols = b * positions;
        let mut cols = vec![0.0; c * kh * kw * n_cols];
        let x = input.data();
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for bi in 0..b {
                        let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for oi in 0..ho {
                            let ii = (oi * sh + ki) as isize - ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                            let base = bi * positions + oi * wo;
                            for oj in 0..wo {
                                let jj = (oj * sw + kj) as isize - pw as isize;
                                if jj >= 0 && jj < w as isize {
                                    dst[base + oj] = src_row[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &[f64], shape: [usize; 4], ho: usize, wo: usize) -> Vec<f64> {
        let [b, c, h, w] = shape;
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let [ph, pw] = self.padding;
        let positions = ho * wo;
        let n_cols = b * positions;
        let mut dx = vec![0.0; b * c * h * w];
        for ci in 0..c {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let src = &dcols[row * n_cols..(row + 1) * n_cols];
                    for bi in 0..b {
                        let plane = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                        for oi in 0..ho {
                            let ii = (oi * sh + ki) as isize - ph as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let base = bi * positions + oi * wo;
                            for oj in 0..wo {
                                let jj = (oj * sw + kj) as isize - pw as isize;
                                if jj >= 0 && jj < w as isize {
                                    plane[ii as usize * w + jj as usize] += src[base + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = expect_spatial(input, "Conv2d")?;
        if c != self.in_channels {
            return Err(Error::Dimension(format!(
                "Conv2d expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let ho = output_size(h, self.kernel[0], self.padding[0], self.stride[0])?;
        let wo = output_size(w, self.kernel[1], self.padding[1], self.stride[1])?;
        let cols = self.im2col(input, ho, wo);
        let inner = c * self.kernel[0] * self.kernel[1];
        let positions = ho * wo;
        let n_cols = b * positions;
        let mut tmp = vec![0.0; self.out_channels * n_cols];
        gemm(
            MatRef::new(self.weight.value.data(), self.out_channels, inner),
            MatRef::new(&cols, inner, n_cols),
            0.0,
            &mut tmp,
        );
        let mut out = vec![0.0; b * self.out_channels * positions];
        let bias = self.bias.value.data();
        for co in 0..self.out_channels {
            for bi in 0..b {
                let src = &tmp[co * n_cols + bi * positions..co * n_cols + (bi + 1) * positions];
                let dst = &mut out[(bi * self.out_channels + co) * positions..][..positions];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias[co];
                }
            }
        }
        if mode.records() {
            self.cache = Some(ConvCache {
                cols,
                input_shape: [b, c, h, w],
                out_hw: [ho, wo],
            });
        }
        Tensor::new(vec![b, self.out_channels, ho, wo], out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| no_cache("Conv2d"))?;
        let [b, c, _, _] = cache.input_shape;
        let [ho, wo] = cache.out_hw;
        let positions = ho * wo;
        let n_cols = b * positions;
        let co_n = self.out_channels;
        if grad_output.shape() != [b, co_n, ho, wo] {
            return Err(Error::Dimension(format!(
                "Conv2d gradient shape {:?} does not match output",
                grad_output.shape()
            )));
        }
        let g = grad_output.data();
        let mut dtmp = vec![0.0; co_n * n_cols];
        let bias_grad = &mut self.bias.grad;
        for co in 0..co_n {
            let mut sum = 0.0;
            for bi in 0..b {
                let src = &g[(bi * co_n + co) * positions..][..positions];
                dtmp[co * n_cols + bi * positions..][..positions].copy_from_slice(src);
                sum += src.iter().sum::<f64>();
            }
            bias_grad[co] += sum;
        }
        let inner = c * self.kernel[0] * self.kernel[1];
        gemm(
            MatRef::new(&dtmp, co_n, n_cols),
            MatRef::new(&cache.cols, inner, n_cols).t(),
            1.0,
            &mut self.weight.grad,
        );
        let mut dcols = vec![0.0; inner * n_cols];
        gemm(
            MatRef::new(self.weight.value.data(), co_n, inner).t(),
            MatRef::new(&dtmp, co_n, n_cols),
            0.0,
            &mut dcols,
        );
        let dx = self.col2im(&dcols, cache.input_shape, ho, wo);
        Tensor::new(cache.input_shape.to_vec(), dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Conv2d {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            cache: None,
            ..*self
        })
    }
}

struct BnCache {
    normalized: Vec<f64>,
    inv_std: Vec<f64>,
    shape: [usize; 4],
    /// Statistics came from the batch, so they depend on the input.
    batch_stats: bool,
}

pub(crate) struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Tensor,
    running_var: Tensor,
    channels: usize,
    cache: Option<BnCache>,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

impl BatchNorm2d {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::new(vec![channels], vec![1.0; channels]).expect("shape")),
            beta: Param::new(Tensor::zeros(vec![channels])),
            running_mean: Tensor::zeros(vec![channels]),
            running_var: Tensor::new(vec![channels], vec![1.0; channels]).expect("shape"),
            channels,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = expect_spatial(input, "BatchNorm2d")?;
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "BatchNorm2d expects {} channels, got {c}",
                self.channels
            )));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let x = input.data();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut out = vec![0.0; x.len()];
        match mode {
            Mode::Eval | Mode::Frozen => {
                let rm = self.running_mean.data();
                let rv = self.running_var.data();
                let inv_stds: Vec<f64> = rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut normalized = if mode.records() { vec![0.0; x.len()] } else { Vec::new() };
                for ci in 0..c {
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for i in off..off + hw {
                            let n = (x[i] - rm[ci]) * inv_stds[ci];
                            out[i] = gamma[ci] * n + beta[ci];
                            if mode.records() {
                                normalized[i] = n;
                            }
                        }
                    }
                }
                if mode.records() {
                    self.cache = Some(BnCache {
                        normalized,
                        inv_std: inv_stds,
                        shape: [b, c, h, w],
                        batch_stats: false,
                    });
                }
            }
            Mode::Train => {
                let mut normalized = vec![0.0; x.len()];
                let mut inv_stds = vec![0.0; c];
                for ci in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        sum += x[off..off + hw].iter().sum::<f64>();
                    }
                    let mean = sum / count;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        sq += x[off..off + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / count;
                    let inv_std = 1.0 / (var + BN_EPS).sqrt();
                    inv_stds[ci] = inv_std;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for i in off..off + hw {
                            let n = (x[i] - mean) * inv_std;
                            normalized[i] = n;
                            out[i] = gamma[ci] * n + beta[ci];
                        }
                    }
                    let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
                    let rm = &mut self.running_mean.data_mut()[ci];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                    let rv = &mut self.running_var.data_mut()[ci];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                }
                self.cache = Some(BnCache {
                    normalized,
                    inv_std: inv_stds,
                    shape: [b, c, h, w],
                    batch_stats: true,
                });
            }
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| no_cache("BatchNorm2d"))?;
        let [b, c, h, w] = cache.shape;
        if grad_output.shape() != cache.shape {
            return Err(Error::Dimension("BatchNorm2d gradient shape mismatch".into()));
        }
        let hw = h * w;
        let count = (b * hw) as f64;
        let g = grad_output.data();
        let xhat = &cache.normalized;
        let mut dx = vec![0.0; g.len()];
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    sum_g += g[i];
                    sum_gx += g[i] * xhat[i];
                }
            }
            self.beta.grad[ci] += sum_g;
            self.gamma.grad[ci] += sum_gx;
            let scale = self.gamma.value.data()[ci] * cache.inv_std[ci];
            for bi in 0..b {
                let off = (bi * c + ci) * hw;
                for i in off..off + hw {
                    dx[i] = if cache.batch_stats {
                        scale * (g[i] - (sum_g + xhat[i] * sum_gx) / count)
                    } else {
                        scale * g[i]
                    };
                }
            }
        }
        Tensor::new(cache.shape.to_vec(), dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn state(&self) -> Vec<&Tensor> {
        vec![
            &self.gamma.value,
            &self.beta.value,
            &self.running_mean,
            &self.running_var,
        ]
    }

    fn state_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.gamma.value,
            &mut self.beta.value,
            &mut self.running_mean,
            &mut self.running_var,
        ]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(BatchNorm2d {
            gamma: self.gamma.clone(),
            beta: self.beta.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            channels: self.channels,
            cache: None,
        })
    }
}

pub(crate) struct Relu {
    mask: Option<(Vec<bool>, Vec<usize>)>,
}

impl Layer for Relu {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out: Vec<f64> = input.data().iter().map(|&v| v.max(0.0)).collect();
        if mode.records() {
            let mask = input.data().iter().map(|&v| v > 0.0).collect();
            self.mask = Some((mask, input.shape().to_vec()));
        }
        Tensor::new(input.shape().to_vec(), out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (mask, shape) = self.mask.take().ok_or_else(|| no_cache("ReLU"))?;
        if grad_output.shape() != shape.as_slice() {
            return Err(Error::Dimension("ReLU gradient shape mismatch".into()));
        }
        let dx = grad_output
            .data()
            .iter()
            .zip(&mask)
            .map(|(&g, &m)| if m { g } else { 0.0 })
            .collect();
        Tensor::new(shape, dx)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Relu { mask: None })
    }
}

pub(crate) struct MaxPool2d {
    kernel: [usize; 2],
    stride: [usize; 2],
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl Layer for MaxPool2d {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = expect_spatial(input, "MaxPool2d")?;
        let ho = output_size(h, self.kernel[0], 0, self.stride[0])?;
        let wo = output_size(w, self.kernel[1], 0, self.stride[1])?;
        let x = input.data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = base + oi * self.stride[0] * w + oj * self.stride[1];
                    for ki in 0..self.kernel[0] {
                        for kj in 0..self.kernel[1] {
                            let idx = base + (oi * self.stride[0] + ki) * w + oj * self.stride[1] + kj;
                            // strict comparison keeps the first maximum on ties
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        if mode.records() {
            self.cache = Some((argmax, [b, c, h, w]));
        }
        Tensor::new(vec![b, c, ho, wo], out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let (argmax, shape) = self.cache.take().ok_or_else(|| no_cache("MaxPool2d"))?;
        if grad_output.len() != argmax.len() {
            return Err(Error::Dimension("MaxPool2d gradient shape mismatch".into()));
        }
        let mut dx = vec![0.0; shape.iter().product()];
        for (&idx, &g) in argmax.iter().zip(grad_output.data()) {
            dx[idx] += g;
        }
        Tensor::new(shape.to_vec(), dx)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(MaxPool2d {
            kernel: self.kernel,
            stride: self.stride,
            cache: None,
        })
    }
}

pub(crate) struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = input.batch();
        let rest = input.len() / b.max(1);
        if mode.records() {
            self.input_shape = Some(input.shape().to_vec());
        }
        input.clone().reshape(vec![b, rest])
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let shape = self.input_shape.take().ok_or_else(|| no_cache("Flatten"))?;
        grad_output.clone().reshape(shape)
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Flatten { input_shape: None })
    }
}

/// `y = x Wᵀ + b` with `W` stored `[out, in]`.
pub(crate) struct Linear {
    pub(crate) weight: Param,
    pub(crate) bias: Param,
    in_features: usize,
    out_features: usize,
    input: Option<Tensor>,
}

impl Linear {
    pub(crate) fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let weight = Tensor::new(
            vec![out_features, in_features],
            kaiming_uniform(rng, out_features * in_features, in_features),
        )
        .expect("shape");
        Self {
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(vec![out_features])),
            in_features,
            out_features,
            input: None,
        }
    }


}

impl Layer for Linear {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let b = input.batch();
        if input.shape() != [b, self.in_features] {
            return Err(Error::Dimension(format!(
                "Linear expects [B, {}], got {:?}",
                self.in_features,
                input.shape()
            )));
        }
        let mut out = Vec::with_capacity(b * self.out_features);
        for _ in 0..b {
            out.extend_from_slice(self.bias.value.data());
        }
        gemm(
            MatRef::new(input.data(), b, self.in_features),
            MatRef::new(self.weight.value.data(), self.out_features, self.in_features).t(),
            1.0,
            &mut out,
        );
        if mode.records() {
            self.input = Some(input.clone());
        }
        Tensor::new(vec![b, self.out_features], out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let input = self.input.take().ok_or_else(|| no_cache("Linear"))?;
        let b = input.batch();
        if grad_output.shape() != [b, self.out_features] {
            return Err(Error::Dimension("Linear gradient shape mismatch".into()));
        }
        let g = grad_output.data();
        gemm(
            MatRef::new(g, b, self.out_features).t(),
            MatRef::new(input.data(), b, self.in_features),
            1.0,
            &mut self.weight.grad,
        );
        for row in g.chunks_exact(self.out_features) {
            for (bg, v) in self.bias.grad.iter_mut().zip(row) {
                *bg += v;
            }
        }
        let mut dx = vec![0.0; b * self.in_features];
        gemm(
            MatRef::new(g, b, self.out_features),
            MatRef::new(self.weight.value.data(), self.out_features, self.in_features),
            0.0,
            &mut dx,
        );
        Tensor::new(vec![b, self.in_features], dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(self.clone())
    }
}

impl Clone for Linear {
    fn clone(&self) -> Self {
        Self {
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            in_features: self.in_features,
            out_features: self.out_features,
            input: None,
        }
    }
}

pub(crate) struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Layer for Dropout {
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode != Mode::Train || self.rate == 0.0 {
            if mode.records() {
                self.mask = Some(vec![1.0; input.len()]);
            }
            return Ok(input.clone());
        }
        let keep = 1.0 - self.rate;
        let mask: Vec<f64> = (0..input.len())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        self.mask = Some(mask);
        Tensor::new(input.shape().to_vec(), out)
    }

    fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| no_cache("Dropout"))?;
        if mask.len() != grad_output.len() {
            return Err(Error::Dimension("Dropout gradient shape mismatch".into()));
        }
        let dx = grad_output.data().iter().zip(&mask).map(|(g, m)| g * m).collect();
        Tensor::new(grad_output.shape().to_vec(), dx)
    }

    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn clone_box(&self) -> Box<dyn Layer> {
        Box::new(Dropout {
            rate: self.rate,
            rng: self.rng.clone(),
            mask: None,
        })
    }
}
