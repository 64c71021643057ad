//! Actor-critic policy: the convolutional feature extractor shared by a
//! tanh-squashed Gaussian actor head and a scalar value head.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_layout::{LayoutMode, Observation};
use crate::market_data::DatasetKind;
use crate::nn::checkpoint::{Checkpoint, TensorRecord};
use crate::nn::{output_size, summarize, LayerSpec, LayerSummary, Mode, Network, Param, Tensor};

/// Width of the extractor's last hidden layer.
pub const FEATURE_DIM: usize = 128;
/// Input accepted by the table-exact geometry: `[1, 52, 344]`.
pub const TABLE_EXACT_INPUT: [usize; 3] = [1, 52, 344];
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const DROPOUT_RATE: f64 = 0.5;
/// Actor head weights are shrunk by this factor so the untrained mean is near 0.
const ACTOR_INIT_SCALE: f64 = 0.01;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The published geometry, including padding 10 on the second convolution.
    TableExact,
    /// Same kernels and channels; padding and pooling adapt to small inputs.
    Adaptive,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::TableExact => "table_exact",
            Preset::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "table_exact" | "table" => Ok(Preset::TableExact),
            "adaptive" => Ok(Preset::Adaptive),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// (out_channels, kernel, stride) of the four convolutions.
const CONVS: [(usize, usize, usize); 4] = [(32, 8, 4), (64, 4, 2), (128, 3, 1), (256, 3, 1)];
/// Convolutions followed by a 2×2 max-pool.
const POOLED: [bool; 4] = [true, true, false, false];

fn conv_spec(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: [usize; 2]) -> LayerSpec {
    LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel: [kernel; 2],
        stride: [stride; 2],
        padding,
    }
}

fn dense_tail(flat: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::linear(flat, 1024),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: DROPOUT_RATE },
        LayerSpec::linear(1024, 512),
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: DROPOUT_RATE },
        LayerSpec::linear(512, FEATURE_DIM),
        LayerSpec::Relu,
    ]
}

/// Layer list of the feature extractor for a `[1, T, F]` input.
pub fn extractor_specs(preset: Preset, window: usize, width: usize) -> Result<Vec<LayerSpec>> {
    match preset {
        Preset::TableExact => table_exact_specs(window, width),
        Preset::Adaptive => adaptive_specs(window, width),
    }
}

fn table_exact_specs(window: usize, width: usize) -> Result<Vec<LayerSpec>> {
    let paddings = [0, 10, 0, 0];
    let mut specs = Vec::new();
    let (mut h, mut w, mut c) = (window, width, 1);
    for (i, &(out, k, s)) in CONVS.iter().enumerate() {
        let p = paddings[i];
        h = output_size(h, k, p, s)?;
        w = output_size(w, k, p, s)?;
        specs.push(conv_spec(c, out, k, s, [p; 2]));
        specs.push(LayerSpec::BatchNorm2d { channels: out });
        specs.push(LayerSpec::Relu);
        if POOLED[i] {
            h = output_size(h, 2, 0, 2)?;
            w = output_size(w, 2, 0, 2)?;
            specs.push(LayerSpec::pool(2));
        }
        c = out;
    }
    specs.extend(dense_tail(c * h * w));
    Ok(specs)
}

fn adaptive_specs(window: usize, width: usize) -> Result<Vec<LayerSpec>> {
    if window == 0 || width == 0 {
        return Err(Error::Geometry(format!("empty input {window}x{width}")));
    }
    let pad_for = |n: usize, k: usize| if n < k { (k - n).div_ceil(2) } else { 0 };
    let mut specs = Vec::new();
    let (mut h, mut w, mut c) = (window, width, 1);
    for (i, &(out, k, s)) in CONVS.iter().enumerate() {
        let padding = [pad_for(h, k), pad_for(w, k)];
        h = output_size(h, k, padding[0], s)?;
        w = output_size(w, k, padding[1], s)?;
        specs.push(conv_spec(c, out, k, s, padding));
        specs.push(LayerSpec::BatchNorm2d { channels: out });
        specs.push(LayerSpec::Relu);
        if POOLED[i] {
            let kernel = [h.min(2), w.min(2)];
            h = output_size(h, kernel[0], 0, kernel[0])?;
            w = output_size(w, kernel[1], 0, kernel[1])?;
            specs.push(LayerSpec::MaxPool2d {
                kernel,
                stride: kernel,
            });
        }
        c = out;
    }
    specs.extend(dense_tail(c * h * w));
    Ok(specs)
}

/// Shape chain of the extractor, e.g. for `shapes` reports.
pub fn describe(preset: Preset, window: usize, width: usize) -> Result<Vec<LayerSummary>> {
    summarize(&extractor_specs(preset, window, width)?, &[1, window, width])
}

/// Result of one `act` call.
#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    /// Squashed action in `[-1, 1]`.
    pub action: Vec<f64>,
    /// Pre-squash Gaussian sample; this is what `evaluate` consumes.
    pub raw_action: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Per-sample outputs of `evaluate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub entropies: Vec<f64>,
    means: Vec<f64>,
    raw_actions: Vec<f64>,
}

/// Descriptive fields stored next to the weights in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layout: Option<LayoutMode>,
    pub kind: Option<DatasetKind>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    input_shape: [usize; 3],
    n_actions: usize,
    preset: Preset,
    layout: Option<LayoutMode>,
    kind: Option<DatasetKind>,
    specs: Vec<LayerSpec>,
}

#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    extractor: Network,
    actor: Network,
    critic: Network,
    log_std: Param,
    preset: Preset,
    input_shape: [usize; 3],
    n_actions: usize,
}

/// `log(1 - tanh(u)^2)`, stable for large `|u|`.
pub fn log_tanh_jacobian(u: f64) -> f64 {
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Draws a pre-squash action (or returns the mean) and its corrected log-density.
pub fn sample_raw<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R, deterministic: bool) -> (Vec<f64>, f64) {
    let raw: Vec<f64> = if deterministic {
        mean.to_vec()
    } else {
        mean.iter()
            .zip(log_std)
            .map(|(&m, &ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let log_prob = PolicyNetwork::log_prob(mean, log_std, &raw);
    (raw, log_prob)
}

impl Evaluation {
    /// Actor means, `n_actions` per sample.
    pub fn means(&self) -> &[f64] {
        &self.means
    }
}

impl PolicyNetwork {
    /// `input_shape` is `(1, T, F)`; `n_actions` is the number of tickers.
    pub fn new(input_shape: [usize; 3], n_actions: usize, preset: Preset, seed: u64) -> Result<Self> {
        if input_shape[0] != 1 {
            return Err(Error::Dimension(format!(
                "policy input must have one channel, got {}",
                input_shape[0]
            )));
        }
        if n_actions == 0 {
            return Err(Error::Parameter("policy needs at least one action".into()));
        }
        let specs = extractor_specs(preset, input_shape[1], input_shape[2])?;
        let extractor = Network::new(specs, input_shape.to_vec(), seed)?;
        let mut actor = Network::new(
            vec![LayerSpec::linear(FEATURE_DIM, n_actions)],
            vec![FEATURE_DIM],
            seed.wrapping_add(1),
        )?;
        actor.params_mut()[0]
            .value
            .data_mut()
            .iter_mut()
            .for_each(|w| *w *= ACTOR_INIT_SCALE);
        let critic = Network::new(
            vec![LayerSpec::linear(FEATURE_DIM, 1)],
            vec![FEATURE_DIM],
            seed.wrapping_add(2),
        )?;
        Ok(Self {
            extractor,
            actor,
            critic,
            log_std: Param::new(Tensor::zeros(vec![n_actions])),
            preset,
            input_shape,
            n_actions,
        })
    }

    pub fn preset(&self) -> Preset {
        self.preset
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn extractor(&self) -> &Network {
        &self.extractor
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        self.extractor.summary()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.log_std
            .value
            .data()
            .iter()
            .map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX))
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.extractor.params();
        out.extend(self.actor.params());
        out.extend(self.critic.params());
        out.push(&self.log_std);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.extractor.params_mut();
        out.extend(self.actor.params_mut());
        out.extend(self.critic.params_mut());
        out.push(&mut self.log_std);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn reseed_dropout(&mut self, seed: u64) {
        self.extractor.reseed_dropout(seed);
    }

    /// Packs observations into a `[B, 1, T, F]` tensor.
    pub fn batch_tensor(&self, observations: &[&Observation]) -> Result<Tensor> {
        let [_, t, f] = self.input_shape;
        let mut data = vec![0.0; observations.len() * t * f];
        for (obs, chunk) in observations.iter().zip(data.chunks_exact_mut(t * f)) {
            if obs.window_days() != t || obs.width() != f {
                return Err(Error::Dimension(format!(
                    "observation is {}x{}, policy expects {t}x{f}",
                    obs.window_days(),
                    obs.width()
                )));
            }
            obs.write_into(chunk);
        }
        Tensor::new(vec![observations.len(), 1, t, f], data)
    }

    /// Means `[B·D]` and values `[B]`.
    fn heads(&mut self, input: &Tensor, mode: Mode) -> Result<(Vec<f64>, Vec<f64>)> {
        let features = self.extractor.forward(input, mode)?;
        let means = self.actor.forward(&features, mode)?.into_data();
        let values = self.critic.forward(&features, mode)?.into_data();
        Ok((means, values))
    }

    /// Actor mean and value for one observation, without sampling.
    pub fn predict(&mut self, obs: &Observation) -> Result<(Vec<f64>, f64)> {
        let input = self.batch_tensor(&[obs])?;
        let (means, values) = self.heads(&input, Mode::Eval)?;
        Ok((means, values[0]))
    }

    /// Log-density of a raw (pre-squash) action under `N(mean, exp(log_std))`,
    /// corrected for the tanh squash.
    pub fn log_prob(mean: &[f64], log_std: &[f64], raw: &[f64]) -> f64 {
        mean.iter()
            .zip(log_std)
            .zip(raw)
            .map(|((&m, &ls), &u)| {
                let z = (u - m) / ls.exp();
                -0.5 * z * z - ls - HALF_LN_2PI - log_tanh_jacobian(u)
            })
            .sum()
    }

    /// Samples (or takes the mean of) the squashed Gaussian in eval mode.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R, deterministic: bool) -> Result<ActOutput> {
        let (mean, value) = self.predict(obs)?;
        let (raw, log_prob) = sample_raw(&mean, &self.log_std(), rng, deterministic);
        let action = raw.iter().map(|u| u.tanh()).collect();
        if !value.is_finite() || !log_prob.is_finite() {
            return Err(Error::Training("policy produced a non-finite output".into()));
        }
        Ok(ActOutput {
            action,
            raw_action: raw,
            log_prob,
            value,
        })
    }

    /// Scores raw actions `[B·D]` for a batch `[B, 1, T, F]`. With a recording
    /// mode the pass can be followed by [`PolicyNetwork::backward`].
    pub fn evaluate(&mut self, input: &Tensor, raw_actions: &[f64], mode: Mode) -> Result<Evaluation> {
        let b = input.batch();
        if raw_actions.len() != b * self.n_actions {
            return Err(Error::Dimension(format!(
                "expected {} actions, got {}",
                b * self.n_actions,
                raw_actions.len()
            )));
        }
        let (means, values) = self.heads(input, mode)?;
        let log_std = self.log_std();
        let d = self.n_actions;
        let entropy = log_std.iter().map(|ls| ls + 0.5 + HALF_LN_2PI).sum::<f64>();
        let log_probs = means
            .chunks_exact(d)
            .zip(raw_actions.chunks_exact(d))
            .map(|(m, u)| Self::log_prob(m, &log_std, u))
            .collect();
        Ok(Evaluation {
            log_probs,
            values,
            entropies: vec![entropy; b],
            means,
            raw_actions: raw_actions.to_vec(),
        })
    }

    /// Backpropagates loss gradients with respect to each sample's
    /// log-prob, value and entropy into every parameter.
    pub fn backward(&mut self, eval: &Evaluation, d_log_prob: &[f64], d_value: &[f64], d_entropy: &[f64]) -> Result<()> {
        let b = eval.values.len();
        let d = self.n_actions;
        if d_log_prob.len() != b || d_value.len() != b || d_entropy.len() != b {
            return Err(Error::Dimension("gradient batch size mismatch".into()));
        }
        let raw_log_std = self.log_std.value.data().to_vec();
        let log_std = self.log_std();
        let mut d_mean = vec![0.0; b * d];
        let mut d_log_std = vec![0.0; d];
        for i in 0..b {
            for j in 0..d {
                let idx = i * d + j;
                let inv_var = (-2.0 * log_std[j]).exp();
                let diff = eval.raw_actions[idx] - eval.means[idx];
                d_mean[idx] = d_log_prob[i] * diff * inv_var;
                d_log_std[j] += d_log_prob[i] * (diff * diff * inv_var - 1.0) + d_entropy[i];
            }
        }
        for j in 0..d {
            if (LOG_STD_MIN..=LOG_STD_MAX).contains(&raw_log_std[j]) {
                self.log_std.grad[j] += d_log_std[j];
            }
        }
        let d_features_actor = self.actor.backward(&Tensor::new(vec![b, d], d_mean)?)?;
        let d_features_critic = self.critic.backward(&Tensor::new(vec![b, 1], d_value.to_vec())?)?;
        let mut d_features = d_features_actor;
        for (a, c) in d_features.data_mut().iter_mut().zip(d_features_critic.data()) {
            *a += c;
        }
        self.extractor.backward(&d_features)?;
        Ok(())
    }

    /// Runs a train-mode pass over `input` so batch-norm running statistics
    /// track the current data. Trainable parameters are untouched.
    pub fn refresh_batch_norm(&mut self, input: &Tensor) -> Result<()> {
        self.extractor.forward(input, Mode::Train)?;
        Ok(())
    }

    fn state_records(&self) -> Vec<TensorRecord> {
        let n = self.extractor.specs().len();
        let mut records: Vec<TensorRecord> = self
            .extractor
            .state_tensors()
            .into_iter()
            .chain(self.actor.state_tensors().into_iter().map(|(_, t)| (n, t)))
            .chain(self.critic.state_tensors().into_iter().map(|(_, t)| (n + 1, t)))
            .map(|(i, t)| TensorRecord {
                layer: i as u32,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        records.push(TensorRecord {
            layer: (n + 2) as u32,
            shape: vec![self.n_actions],
            values: self.log_std.value.data().to_vec(),
        });
        records
    }

    pub fn to_checkpoint(&self, meta: &CheckpointMeta) -> Result<Checkpoint> {
        let header = Header {
            input_shape: self.input_shape,
            n_actions: self.n_actions,
            preset: self.preset,
            layout: meta.layout,
            kind: meta.kind,
            specs: self.extractor.specs().to_vec(),
        };
        Ok(Checkpoint {
            header: serde_json::to_value(header)
                .map_err(|e| Error::Checkpoint(format!("header: {e}")))?,
            tensors: self.state_records(),
        })
    }

    /// SHA-256 of every parameter and running statistic.
    pub fn state_digest(&self) -> String {
        Checkpoint {
            header: serde_json::Value::Null,
            tensors: self.state_records(),
        }
        .tensor_digest()
    }

    pub fn save<W: Write>(&self, writer: W, meta: &CheckpointMeta) -> Result<()> {
        self.to_checkpoint(meta)?.write(writer)
    }

    pub fn from_checkpoint(checkpoint: &Checkpoint) -> Result<(Self, CheckpointMeta)> {
        let header: Header = serde_json::from_value(checkpoint.header.clone())
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut policy = Self::new(header.input_shape, header.n_actions, header.preset, 0)?;
        if policy.extractor.specs() != header.specs.as_slice() {
            return Err(Error::Checkpoint(
                "stored layer list does not match the preset geometry".into(),
            ));
        }
        let expected = policy.state_records();
        if expected.len() != checkpoint.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                checkpoint.tensors.len()
            )));
        }
        for (want, got) in expected.iter().zip(&checkpoint.tensors) {
            if want.layer != got.layer || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor for layer {} has shape {:?}, expected layer {} shape {:?}",
                    got.layer, got.shape, want.layer, want.shape
                )));
            }
        }
        let mut tensors = checkpoint.tensors.iter();
        let targets = policy
            .extractor
            .state_tensors_mut()
            .into_iter()
            .chain(policy.actor.state_tensors_mut())
            .chain(policy.critic.state_tensors_mut())
            .map(|(_, t)| t);
        for target in targets {
            let src = tensors.next().expect("counted above");
            target.data_mut().copy_from_slice(&src.values);
        }
        let src = tensors.next().expect("counted above");
        policy.log_std.value.data_mut().copy_from_slice(&src.values);
        let meta = CheckpointMeta {
            layout: header.layout,
            kind: header.kind,
        };
        Ok((policy, meta))
    }

    pub fn load<R: Read>(reader: R) -> Result<(Self, CheckpointMeta)> {
        Self::from_checkpoint(&Checkpoint::read(reader)?)
    }
}
