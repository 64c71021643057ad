//! Clipped-surrogate PPO with GAE(λ) advantages.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_layout::Observation;
use crate::nn::{clip_grad_norm, Adam, Mode};
use crate::policy::{sample_raw, PolicyNetwork};
use crate::trading_env::TradingEnv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_timesteps: usize,
    /// Steps collected per environment between updates.
    pub n_steps: usize,
    /// Environments stepped in lockstep; each rollout holds `n_steps * n_envs` transitions.
    pub n_envs: usize,
    /// Multiplies rewards before they enter the advantage and value targets.
    pub reward_scale: f64,
    /// Train-mode passes (dropout, batch statistics) during updates instead of
    /// the inference-time network the rollouts used.
    pub dropout_in_updates: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 10,
            minibatch_size: 64,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_timesteps: 200_000,
            n_steps: 2048,
            n_envs: 1,
            reward_scale: 1e-4,
            dropout_in_updates: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.gae_lambda > 0.0 && self.gae_lambda <= 1.0) {
            return bad("gae_lambda must lie in (0, 1]");
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.n_steps == 0 || self.n_envs == 0 {
            return bad("epochs, minibatch_size, n_steps and n_envs must be positive");
        }
        if !(self.learning_rate >= 0.0) || !(self.max_grad_norm > 0.0) || !(self.reward_scale > 0.0) {
            return bad("learning_rate must be >= 0, max_grad_norm and reward_scale > 0");
        }
        if !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return bad("loss coefficients must be non-negative");
        }
        Ok(())
    }

    /// Transitions gathered per update.
    pub fn rollout_size(&self) -> usize {
        self.n_steps * self.n_envs
    }

    /// `ceil(total_timesteps / rollout_size)`.
    pub fn n_updates(&self) -> usize {
        self.total_timesteps.div_ceil(self.rollout_size())
    }
}

/// Transitions in time-major order: entry `t * n_envs + e`.
#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    pub n_envs: usize,
    pub n_actions: usize,
    pub observations: Vec<Observation>,
    /// Pre-squash actions, `n_actions` per transition.
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state following the last step, per environment.
    pub last_values: Vec<f64>,
    pub reward_scale: f64,
    pub advantages: Option<Vec<f64>>,
    pub returns: Option<Vec<f64>>,
}

impl RolloutBuffer {
    pub fn new(n_envs: usize, n_actions: usize, reward_scale: f64) -> Self {
        Self {
            n_envs,
            n_actions,
            reward_scale,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn push(&mut self, obs: Observation, raw_action: &[f64], reward: f64, value: f64, log_prob: f64, done: bool) {
        self.observations.push(obs);
        self.actions.extend_from_slice(raw_action);
        self.rewards.push(reward);
        self.values.push(value);
        self.log_probs.push(log_prob);
        self.dones.push(done);
        self.advantages = None;
        self.returns = None;
    }

    pub fn is_finalized(&self) -> bool {
        self.advantages.is_some() && self.returns.is_some()
    }
}

/// Environments stepped together, with their current observations and
/// running episode returns.
#[derive(Debug, Clone)]
pub struct VecEnv {
    envs: Vec<TradingEnv>,
    current: Vec<Observation>,
    running: Vec<f64>,
    completed: Vec<f64>,
}

impl VecEnv {
    pub fn new(mut envs: Vec<TradingEnv>) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Parameter("no environments".into()));
        }
        let current = envs.iter_mut().map(|e| e.reset()).collect::<Result<_>>()?;
        let n = envs.len();
        Ok(Self {
            envs,
            current,
            running: vec![0.0; n],
            completed: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn n_stocks(&self) -> usize {
        self.envs[0].n_stocks()
    }

    /// Raw (unscaled) returns of every finished episode so far.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed
    }
}

/// Steps every environment `n_steps` times with stochastic actions.
pub fn collect_rollouts<R: Rng + ?Sized>(
    envs: &mut VecEnv,
    policy: &mut PolicyNetwork,
    n_steps: usize,
    reward_scale: f64,
    rng: &mut R,
) -> Result<RolloutBuffer> {
    if n_steps == 0 {
        return Err(Error::Parameter("n_steps must be positive".into()));
    }
    let n_envs = envs.len();
    let d = policy.n_actions();
    let mut buffer = RolloutBuffer::new(n_envs, d, reward_scale);
    for _ in 0..n_steps {
        let refs: Vec<&Observation> = envs.current.iter().collect();
        let input = policy.batch_tensor(&refs)?;
        let eval = policy.evaluate(&input, &vec![0.0; n_envs * d], Mode::Eval)?;
        let log_std = policy.log_std();
        for e in 0..n_envs {
            let mean = &eval.means()[e * d..(e + 1) * d];
            let (raw, log_prob) = sample_raw(mean, &log_std, rng, false);
            let action: Vec<f64> = raw.iter().map(|u| u.tanh()).collect();
            let env = &mut envs.envs[e];
            let (next_obs, outcome) = env.step(&action)?;
            envs.running[e] += outcome.reward;
            let obs = std::mem::replace(&mut envs.current[e], next_obs);
            buffer.push(obs, &raw, outcome.reward, eval.values[e], log_prob, outcome.done);
            if outcome.done {
                envs.completed.push(envs.running[e]);
                envs.running[e] = 0.0;
                envs.current[e] = env.reset()?;
            }
        }
    }
    let refs: Vec<&Observation> = envs.current.iter().collect();
    let input = policy.batch_tensor(&refs)?;
    buffer.last_values = policy
        .evaluate(&input, &vec![0.0; n_envs * d], Mode::Eval)?
        .values;
    Ok(buffer)
}

/// Fills `advantages` and `returns` (unnormalized) from the recorded rewards,
/// values and done flags.
pub fn compute_gae(buffer: &mut RolloutBuffer, gamma: f64, lambda: f64) -> Result<()> {
    if buffer.is_empty() {
        return Err(Error::State("cannot compute advantages of an empty buffer".into()));
    }
    let n_envs = buffer.n_envs.max(1);
    if buffer.len() % n_envs != 0 || buffer.last_values.len() != n_envs {
        return Err(Error::State("buffer is missing bootstrap values".into()));
    }
    let steps = buffer.len() / n_envs;
    let mut adv = vec![0.0; buffer.len()];
    for e in 0..n_envs {
        let mut next_adv = 0.0;
        let mut next_value = buffer.last_values[e];
        for t in (0..steps).rev() {
            let i = t * n_envs + e;
            let live = if buffer.dones[i] { 0.0 } else { 1.0 };
            let reward = buffer.rewards[i] * buffer.reward_scale;
            let delta = reward + gamma * next_value * live - buffer.values[i];
            next_adv = delta + gamma * lambda * live * next_adv;
            adv[i] = next_adv;
            next_value = buffer.values[i];
        }
    }
    buffer.returns = Some(adv.iter().zip(&buffer.values).map(|(a, v)| a + v).collect());
    buffer.advantages = Some(adv);
    Ok(())
}

/// `min(r·A, clip(r, 1−ε, 1+ε)·A)`, the quantity PPO maximizes.
pub fn clipped_objective(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Mean probability ratio on the very first minibatch.
    pub first_ratio: f64,
    pub first_approx_kl: f64,
    pub grad_norm: f64,
}

/// Runs `epochs` passes of shuffled minibatch Adam steps over a finalized buffer.
pub fn ppo_update<R: Rng + ?Sized>(
    policy: &mut PolicyNetwork,
    optimizer: &mut Adam,
    buffer: &RolloutBuffer,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let (raw_adv, returns) = match (&buffer.advantages, &buffer.returns) {
        (Some(a), Some(r)) => (a, r),
        _ => return Err(Error::State("buffer not finalized; run compute_gae first".into())),
    };
    let n = buffer.len();
    let d = policy.n_actions();
    let mean = raw_adv.iter().sum::<f64>() / n as f64;
    let std = (raw_adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let adv: Vec<f64> = raw_adv.iter().map(|a| (a - mean) / (std + 1e-8)).collect();
    let mode = if config.dropout_in_updates { Mode::Train } else { Mode::Frozen };
    optimizer.learning_rate = config.learning_rate;

    let mut totals = [0.0f64; 6];
    let mut batches = 0usize;
    let mut first = None;
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(config.minibatch_size) {
            let m = chunk.len() as f64;
            let obs: Vec<&Observation> = chunk.iter().map(|&i| &buffer.observations[i]).collect();
            let input = policy.batch_tensor(&obs)?;
            let actions: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| buffer.actions[i * d..(i + 1) * d].iter().copied())
                .collect();
            let eval = policy.evaluate(&input, &actions, mode)?;

            let mut d_logp = Vec::with_capacity(chunk.len());
            let mut d_value = Vec::with_capacity(chunk.len());
            let (mut pl, mut vl, mut ent, mut clipped, mut kl, mut ratio_sum) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, &i) in chunk.iter().enumerate() {
                let log_ratio = eval.log_probs[j] - buffer.log_probs[i];
                let ratio = log_ratio.exp();
                let a = adv[i];
                let objective = clipped_objective(ratio, a, config.clip_eps);
                pl -= objective / m;
                // gradient flows only through the unclipped branch
                let unclipped_active = ratio * a <= objective;
                d_logp.push(if unclipped_active { -ratio * a / m } else { 0.0 });
                let err = eval.values[j] - returns[i];
                vl += err * err / m;
                d_value.push(config.value_coef * 2.0 * err / m);
                ent += eval.entropies[j] / m;
                if (ratio - 1.0).abs() > config.clip_eps {
                    clipped += 1.0 / m;
                }
                kl += ((ratio - 1.0) - log_ratio) / m;
                ratio_sum += ratio / m;
            }
            let loss = pl - config.entropy_coef * ent + config.value_coef * vl;
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {loss} (policy {pl}, value {vl}, entropy {ent}, approx_kl {kl})"
                )));
            }
            if first.is_none() {
                first = Some((ratio_sum, kl));
            }
            policy.zero_grad();
            let d_entropy = vec![-config.entropy_coef / m; chunk.len()];
            policy.backward(&eval, &d_logp, &d_value, &d_entropy)?;
            let mut params = policy.params_mut();
            let norm = clip_grad_norm(&mut params, config.max_grad_norm);
            if !norm.is_finite() {
                return Err(Error::Training(format!("non-finite gradient norm (loss {loss})")));
            }
            optimizer.step(&mut params);
            for (t, v) in totals.iter_mut().zip([pl, vl, ent, clipped, kl, norm]) {
                *t += v;
            }
            batches += 1;
        }
    }
    let avg = |k: usize| totals[k] / batches as f64;
    let (first_ratio, first_approx_kl) = first.expect("at least one minibatch");
    Ok(UpdateStats {
        policy_loss: avg(0),
        value_loss: avg(1),
        entropy: avg(2),
        clip_fraction: avg(3),
        approx_kl: avg(4),
        first_ratio,
        first_approx_kl,
        grad_norm: avg(5),
    })
}

/// Re-estimates batch-norm running statistics on the rollout observations.
pub fn refresh_batch_norm(policy: &mut PolicyNetwork, buffer: &RolloutBuffer, chunk: usize) -> Result<()> {
    for part in buffer.observations.chunks(chunk.max(2)) {
        if part.len() < 2 {
            continue;
        }
        let refs: Vec<&Observation> = part.iter().collect();
        let input = policy.batch_tensor(&refs)?;
        policy.refresh_batch_norm(&input)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub update_index: usize,
    pub timesteps: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Mean raw return of the last (up to) 100 finished episodes.
    pub mean_episode_return: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
    pub episode_returns: Vec<f64>,
}

impl TrainingLog {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "update_index",
            "timesteps",
            "policy_loss",
            "value_loss",
            "entropy",
            "clip_fraction",
            "approx_kl",
            "mean_episode_return",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.update_index.to_string(),
                r.timesteps.to_string(),
                r.policy_loss.to_string(),
                r.value_loss.to_string(),
                r.entropy.to_string(),
                r.clip_fraction.to_string(),
                r.approx_kl.to_string(),
                r.mean_episode_return.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const RETURN_WINDOW: usize = 100;

/// Alternates rollouts and updates until `total_timesteps` transitions
/// have been collected. `make_env` is called once per parallel environment.
pub fn train<F>(mut make_env: F, policy: &mut PolicyNetwork, config: &PpoConfig, seed: u64) -> Result<TrainingLog>
where
    F: FnMut(usize) -> Result<TradingEnv>,
{
    config.validate()?;
    let envs = (0..config.n_envs).map(&mut make_env).collect::<Result<Vec<_>>>()?;
    let mut envs = VecEnv::new(envs)?;
    if envs.n_stocks() != policy.n_actions() {
        return Err(Error::Dimension(format!(
            "environment trades {} tickers, policy emits {} actions",
            envs.n_stocks(),
            policy.n_actions()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut optimizer = Adam::new(config.learning_rate);
    let mut log = TrainingLog::default();
    let mut timesteps = 0;
    for update_index in 0..config.n_updates() {
        let mut buffer = collect_rollouts(&mut envs, policy, config.n_steps, config.reward_scale, &mut rng)?;
        timesteps += buffer.len();
        compute_gae(&mut buffer, config.gamma, config.gae_lambda)?;
        let stats = ppo_update(policy, &mut optimizer, &buffer, config, &mut rng)
            .map_err(|e| e.context(format!("update {update_index}")))?;
        if !config.dropout_in_updates {
            refresh_batch_norm(policy, &buffer, config.minibatch_size)?;
        }
        let done = envs.completed_returns();
        let recent = &done[done.len().saturating_sub(RETURN_WINDOW)..];
        let mean_episode_return = (!recent.is_empty()).then(|| recent.iter().sum::<f64>() / recent.len() as f64);
        log::debug!(
            "update {update_index}: steps {timesteps} policy {:.4} value {:.4} kl {:.5}",
            stats.policy_loss,
            stats.value_loss,
            stats.approx_kl
        );
        log.rows.push(LogRow {
            update_index,
            timesteps,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            mean_episode_return,
        });
    }
    log.episode_returns = envs.completed_returns().to_vec();
    Ok(log)
}
