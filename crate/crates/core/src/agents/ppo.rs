//! Clipped PPO with a shared actor and a centralized critic.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tarmac::{TarmacActor, TarmacCache, TarmacConfig};
use super::{agent_inputs, critic_input, episode_start, input_dim, validate_policy, AgentKind, Architecture, EpisodeLog, Policy, PolicyNet};
use crate::bench::{mean_std, Metrics, MetricsAccumulator};
use crate::env::{derive_seed, Env, EnvConfig, RewardWeights, OBS_LEN};
use crate::error::{Error, Result};
use crate::neural::{all_finite, clip_global_norm, Activation, Adam, AdamConfig, Grads, Mlp, MlpCache, Parameterized, Tensor2};

const STREAM_INIT: u64 = 0x1000;
const STREAM_SAMPLING: u64 = 0x1001;
const STREAM_EPISODES: u64 = 0x1002;
const STREAM_VALIDATION: u64 = 0x1003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub kind: AgentKind,
    pub lr: f64,
    pub critic_lr: f64,
    /// Minibatch size in agent samples; realized as `ceil(minibatch / N)` whole timesteps.
    pub minibatch: usize,
    pub clip: f64,
    pub max_grad_norm: f64,
    /// Passes over the epoch memory per update phase.
    pub updates: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub episode_steps: usize,
    pub gamma: f64,
    /// Final steps of each episode left out of the training samples.
    pub return_tail: usize,
    pub normalize_advantages: bool,
    /// Fit the critic to returns standardized by running statistics.
    pub normalize_values: bool,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub tarmac: TarmacConfig,
    pub seed: u64,
    /// Start each episode at a random time of day.
    pub random_start: bool,
    /// Greedy validation rollout length after each epoch (0 disables it).
    pub validation_steps: usize,
    pub validation_warmup: usize,
    /// Remember the policy with the lowest validation cost (needs validation).
    pub keep_best: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::PpoHe,
            lr: 1e-3,
            critic_lr: 1e-3,
            minibatch: 512,
            clip: 0.2,
            max_grad_norm: 0.5,
            updates: 10,
            epochs: 200,
            episodes_per_epoch: 1,
            episode_steps: 16_000,
            gamma: 0.99,
            return_tail: 1000,
            normalize_advantages: true,
            normalize_values: true,
            actor_hidden: vec![100, 100],
            critic_hidden: vec![100, 100],
            tarmac: TarmacConfig::default(),
            seed: 0,
            random_start: true,
            validation_steps: 0,
            validation_warmup: 0,
            keep_best: false,
        }
    }
}

impl PpoConfig {
    /// Defaults for one PPO variant.
    pub fn for_kind(kind: AgentKind) -> Self {
        let base = Self {
            kind,
            ..Self::default()
        };
        if kind == AgentKind::Tarmac {
            Self {
                minibatch: 256,
                critic_hidden: vec![128, 128],
                ..base
            }
        } else {
            base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AgentKind::Dqn {
            return Err(Error::config("PPO training needs a PPO agent kind"));
        }
        if !(self.lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.minibatch == 0 || self.updates == 0 || self.episodes_per_epoch == 0 || self.episode_steps == 0 {
            return Err(Error::config("minibatch, updates, episodes and episode length must be positive"));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(self.clip > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::config("invalid gamma, clip or gradient-norm limit"));
        }
        self.tarmac.validate()
    }
}

/// Mean per-agent penalty implied by validation RMSEs: `α_temp·T² + α_sig·S²`.
pub fn validation_cost(m: &Metrics, w: &RewardWeights) -> f64 {
    w.temperature * m.temperature_rmse * m.temperature_rmse + w.signal * m.signal_rmse * m.signal_rmse
}

/// `G_t = r_t + γ G_{t+1}`, with nothing beyond the last reward.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

/// `min(ratio·A, clip(ratio, 1 − ε, 1 + ε)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

fn log_softmax_row(l0: f64, l1: f64) -> (f64, f64) {
    let m = l0.max(l1);
    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
    (l0 - lse, l1 - lse)
}

/// Mean negative clipped surrogate over a batch of two-action logits.
/// Returns the loss, its gradient w.r.t. the logits and the largest |ratio − 1|.
pub fn ppo_loss(logits: &Tensor2, actions: &[u8], old_logp: &[f64], advantages: &[f64], clip: f64) -> (f64, Tensor2, f64) {
    let b = logits.nrows();
    let mut grad = Array2::zeros((b, 2));
    let mut loss = 0.0;
    let mut max_dev: f64 = 0.0;
    for k in 0..b {
        let (lp0, lp1) = log_softmax_row(logits[[k, 0]], logits[[k, 1]]);
        let a = usize::from(actions[k]);
        let logp = if a == 1 { lp1 } else { lp0 };
        let ratio = (logp - old_logp[k]).exp();
        max_dev = max_dev.max((ratio - 1.0).abs());
        let adv = advantages[k];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        loss -= unclipped.min(clipped);
        // d(−min)/d logp: the clipped branch is flat outside the trust region.
        let active = unclipped <= clipped || (1.0 - clip..=1.0 + clip).contains(&ratio);
        let dlogp = if active { -unclipped / b as f64 } else { 0.0 };
        let p = [lp0.exp(), lp1.exp()];
        for j in 0..2 {
            let onehot = if j == a { 1.0 } else { 0.0 };
            grad[[k, j]] = dlogp * (onehot - p[j]);
        }
    }
    (loss / b as f64, grad, max_dev)
}

enum ActorCache {
    Mlp(MlpCache),
    Tarmac(TarmacCache),
}

fn actor_forward(net: &PolicyNet, x: &Tensor2, senders: &[Vec<usize>]) -> Result<(Tensor2, ActorCache)> {
    match net {
        PolicyNet::Mlp(m) => m.forward(x).map(|(y, c)| (y, ActorCache::Mlp(c))),
        PolicyNet::Tarmac(t) => t.forward(x, senders).map(|(y, c)| (y, ActorCache::Tarmac(c))),
    }
}

fn actor_backward(net: &PolicyNet, cache: &ActorCache, dlogits: &Tensor2) -> Result<Grads> {
    match (net, cache) {
        (PolicyNet::Mlp(m), ActorCache::Mlp(c)) => m.backward(c, dlogits).map(|(g, _)| g),
        (PolicyNet::Tarmac(t), ActorCache::Tarmac(c)) => t.backward(c, dlogits),
        _ => Err(Error::shape("actor cache does not match the network")),
    }
}

/// Experience from one epoch, indexed by `(timestep, agent)`.
#[derive(Default)]
struct Memory {
    steps: usize,
    inputs: Vec<f64>,
    senders: Vec<Vec<usize>>,
    critic_inputs: Vec<f64>,
    actions: Vec<u8>,
    logp: Vec<f64>,
    rewards: Vec<f64>,
    returns: Vec<f64>,
    /// Timesteps used as training samples.
    usable: Vec<usize>,
}

pub struct PpoTrainer {
    pub config: PpoConfig,
    env: Env,
    actor: PolicyNet,
    critic: Mlp,
    actor_opt: Adam,
    critic_opt: Adam,
    sampling: ChaCha8Rng,
    episodes: ChaCha8Rng,
    epoch: usize,
    in_dim: usize,
    values: ValueNorm,
    best: Option<(f64, Policy)>,
}

/// Running mean and standard deviation of critic targets.
#[derive(Debug, Clone, Copy)]
struct ValueNorm {
    mean: f64,
    std: f64,
    ready: bool,
}

impl ValueNorm {
    const DECAY: f64 = 0.9;

    fn identity() -> Self {
        Self { mean: 0.0, std: 1.0, ready: false }
    }

    fn observe(&mut self, targets: &[f64]) {
        if targets.is_empty() {
            return;
        }
        let (m, s) = mean_std(targets);
        let s = if s.is_finite() { s.max(1e-6) } else { 1.0 };
        if self.ready {
            self.mean = Self::DECAY * self.mean + (1.0 - Self::DECAY) * m;
            self.std = Self::DECAY * self.std + (1.0 - Self::DECAY) * s;
        } else {
            self.mean = m;
            self.std = s;
            self.ready = true;
        }
    }

    fn denormalize(&self, v: f64) -> f64 {
        self.mean + self.std * v
    }

    fn normalize(&self, g: f64) -> f64 {
        (g - self.mean) / self.std
    }
}

impl PpoTrainer {
    pub fn new(env_config: EnvConfig, config: PpoConfig) -> Result<Self> {
        Self::with_env(Env::new(env_config)?, config)
    }

    pub fn with_env(env: Env, config: PpoConfig) -> Result<Self> {
        config.validate()?;
        let n = env.n();
        let nc = env.config().neighbours;
        let in_dim = input_dim(config.kind, nc);
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT));
        let actor = if config.kind == AgentKind::Tarmac {
            PolicyNet::Tarmac(TarmacActor::new(OBS_LEN, config.tarmac, &mut init)?)
        } else {
            let sizes: Vec<usize> = std::iter::once(in_dim).chain(config.actor_hidden.iter().copied()).chain([2]).collect();
            PolicyNet::Mlp(Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut init)?)
        };
        let critic_sizes: Vec<usize> = std::iter::once(n * OBS_LEN)
            .chain(config.critic_hidden.iter().copied())
            .chain([n])
            .collect();
        let critic = Mlp::new(&critic_sizes, Activation::Relu, Activation::Identity, &mut init)?;
        Ok(Self {
            actor_opt: Adam::new(AdamConfig::with_lr(config.lr), &actor),
            critic_opt: Adam::new(AdamConfig::with_lr(config.critic_lr), &critic),
            sampling: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SAMPLING)),
            episodes: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EPISODES)),
            actor,
            critic,
            env,
            config,
            epoch: 0,
            in_dim,
            values: ValueNorm::identity(),
            best: None,
        })
    }

    /// Continue from a previously trained policy (actor and critic).
    pub fn with_policy(mut self, policy: Policy) -> Result<Self> {
        if policy.kind() != self.config.kind {
            return Err(Error::IncompatibleCheckpoint("agent kind differs from the training config".into()));
        }
        let critic = policy
            .critic
            .ok_or_else(|| Error::IncompatibleCheckpoint("checkpoint has no critic to resume from".into()))?;
        if critic.sizes() != self.critic.sizes() || policy.net.params().len() != self.actor.params().len() {
            return Err(Error::IncompatibleCheckpoint("network shapes differ from the training config".into()));
        }
        self.actor.load_params(&policy.net.to_params())?;
        self.critic = critic;
        Ok(self)
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn policy(&self) -> Policy {
        let arch = Architecture {
            kind: self.config.kind,
            houses: self.env.n(),
            neighbours: self.env.config().neighbours,
            sizes: match &self.actor {
                PolicyNet::Mlp(m) => m.sizes(),
                PolicyNet::Tarmac(_) => Vec::new(),
            },
            tarmac: match &self.actor {
                PolicyNet::Tarmac(t) => Some(t.config),
                PolicyNet::Mlp(_) => None,
            },
            critic_sizes: self.critic.sizes(),
        };
        Policy {
            architecture: arch,
            net: self.actor.clone(),
            critic: Some(self.critic.clone()),
            normalization: self.env.config().normalization,
        }
    }

    /// Policy with the lowest validation cost so far, or the current one.
    pub fn best_policy(&self) -> Policy {
        match &self.best {
            Some((_, p)) => p.clone(),
            None => self.policy(),
        }
    }

    /// Validation cost of the remembered policy.
    pub fn best_cost(&self) -> Option<f64> {
        self.best.as_ref().map(|(c, _)| *c)
    }

    fn collect(&mut self, memory: &mut Memory, acc: &mut MetricsAccumulator) -> Result<f64> {
        let n = self.env.n();
        let kind = self.config.kind;
        let checksum = self.actor.checksum();
        let mut return_sum = 0.0;
        for _ in 0..self.config.episodes_per_epoch {
            let episode = self.epoch * self.config.episodes_per_epoch + memory.steps / self.config.episode_steps.max(1);
            let seed = derive_seed(self.config.seed ^ 0x5eed_0000, episode as u64);
            let start = if self.config.random_start {
                episode_start(&mut self.episodes, self.env.config().dt)
            } else {
                self.env.config().start_time
            };
            self.env.reset_at(seed, start)?;
            let first = memory.steps;
            for _ in 0..self.config.episode_steps {
                let (x, senders) = agent_inputs(&self.env, kind);
                let logits = self.actor.logits(&x, &senders)?;
                let mut actions = Vec::with_capacity(n);
                for i in 0..n {
                    let (lp0, lp1) = log_softmax_row(logits[[i, 0]], logits[[i, 1]]);
                    let on = self.sampling.random::<f64>() < lp1.exp();
                    memory.actions.push(u8::from(on));
                    memory.logp.push(if on { lp1 } else { lp0 });
                    actions.push(on);
                }
                memory.inputs.extend(x.iter());
                memory.senders.extend(senders);
                memory.critic_inputs.extend(critic_input(&self.env));
                let step = self.env.step(&actions)?;
                if self.env.diverged() {
                    return Err(Error::DivergenceDetected("house temperature left the physical range during training".into()));
                }
                acc.record(&self.env);
                memory.rewards.extend(&step.rewards);
                return_sum += step.rewards.iter().sum::<f64>();
                memory.steps += 1;
            }
            let len = memory.steps - first;
            memory.returns.resize(memory.steps * n, 0.0);
            for i in 0..n {
                let r: Vec<f64> = (first..memory.steps).map(|t| memory.rewards[t * n + i]).collect();
                for (k, g) in discounted_returns(&r, self.config.gamma).into_iter().enumerate() {
                    memory.returns[(first + k) * n + i] = g;
                }
            }
            let keep = if len > self.config.return_tail { len - self.config.return_tail } else { len };
            memory.usable.extend(first..first + keep);
        }
        debug_assert_eq!(checksum, self.actor.checksum(), "all agents must act with one parameter vector");
        Ok(return_sum / (n * self.config.episodes_per_epoch) as f64)
    }

    /// Roll out one epoch with the current policy, then update actor and critic.
    pub fn train_epoch(&mut self) -> Result<EpisodeLog> {
        let mut memory = Memory::default();
        let mut acc = MetricsAccumulator::new(0);
        let mean_return = self.collect(&mut memory, &mut acc)?;
        let (actor_loss, critic_loss, ratio_dev) = self.update(&memory)?;
        let train_metrics = acc.finish();
        let validation = if self.config.validation_steps > 0 {
            Some(validate_policy(
                &self.env,
                &self.policy(),
                derive_seed(self.config.seed, STREAM_VALIDATION),
                self.config.validation_steps,
                self.config.validation_warmup,
            )?)
        } else {
            None
        };
        if let (true, Some(v)) = (self.config.keep_best, validation.as_ref()) {
            let cost = validation_cost(v, &self.env.config().reward);
            if self.best.as_ref().is_none_or(|(c, _)| cost < *c) {
                self.best = Some((cost, self.policy()));
            }
        }
        let log = EpisodeLog {
            episode: self.epoch,
            steps: memory.steps,
            mean_return,
            signal_rmse: train_metrics.signal_rmse,
            temperature_rmse: train_metrics.temperature_rmse,
            max_temperature_rmse: train_metrics.max_temperature_rmse,
            validation,
            loss: Some(actor_loss),
            critic_loss: Some(critic_loss),
            epsilon: None,
            initial_ratio_deviation: Some(ratio_dev),
        };
        self.epoch += 1;
        Ok(log)
    }

    fn update(&mut self, memory: &Memory) -> Result<(f64, f64, f64)> {
        let n = self.env.n();
        let cin = n * OBS_LEN;
        let usable = &memory.usable;
        if usable.is_empty() {
            return Ok((0.0, 0.0, 0.0));
        }

        // Advantages from the critic before any update.
        let mut advantages = vec![0.0; memory.steps * n];
        for chunk in usable.chunks(1024) {
            let x = Array2::from_shape_fn((chunk.len(), cin), |(r, c)| memory.critic_inputs[chunk[r] * cin + c]);
            let v = self.critic.predict(&x)?;
            for (r, &t) in chunk.iter().enumerate() {
                for i in 0..n {
                    advantages[t * n + i] = memory.returns[t * n + i] - self.values.denormalize(v[[r, i]]);
                }
            }
        }
        if self.config.normalize_advantages {
            let vals: Vec<f64> = usable.iter().flat_map(|&t| (0..n).map(move |i| t * n + i)).map(|k| advantages[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / vals.len() as f64;
            let sd = var.sqrt().max(1e-8);
            for &t in usable {
                for i in 0..n {
                    advantages[t * n + i] = (advantages[t * n + i] - mean) / sd;
                }
            }
        }

        if self.config.normalize_values {
            let targets: Vec<f64> = usable.iter().flat_map(|&t| (0..n).map(move |i| t * n + i)).map(|k| memory.returns[k]).collect();
            self.values.observe(&targets);
        }
        let values = self.values;

        let per_batch = self.config.minibatch.div_ceil(n).max(1);
        let mut order = usable.clone();
        let mut actor_loss_sum = 0.0;
        let mut critic_loss_sum = 0.0;
        let mut batches = 0usize;
        let mut first_dev = None;
        for _ in 0..self.config.updates {
            order.shuffle(&mut self.sampling);
            for chunk in order.chunks(per_batch) {
                let rows = chunk.len() * n;
                let x = Array2::from_shape_fn((rows, self.in_dim), |(r, c)| {
                    let (b, i) = (r / n, r % n);
                    memory.inputs[(chunk[b] * n + i) * self.in_dim + c]
                });
                let senders: Vec<Vec<usize>> = (0..rows)
                    .map(|r| {
                        let (b, i) = (r / n, r % n);
                        memory.senders[chunk[b] * n + i].iter().map(|&j| b * n + j).collect()
                    })
                    .collect();
                let idx = |r: usize| chunk[r / n] * n + r % n;
                let actions: Vec<u8> = (0..rows).map(|r| memory.actions[idx(r)]).collect();
                let old: Vec<f64> = (0..rows).map(|r| memory.logp[idx(r)]).collect();
                let adv: Vec<f64> = (0..rows).map(|r| advantages[idx(r)]).collect();

                let (logits, cache) = actor_forward(&self.actor, &x, &senders)?;
                let (loss, dlogits, dev) = ppo_loss(&logits, &actions, &old, &adv, self.config.clip);
                first_dev.get_or_insert(dev);
                let mut grads = actor_backward(&self.actor, &cache, &dlogits)?;
                clip_global_norm(&mut grads, self.config.max_grad_norm);
                self.actor_opt.step(&mut self.actor, &grads)?;

                let xc = Array2::from_shape_fn((chunk.len(), cin), |(r, c)| memory.critic_inputs[chunk[r] * cin + c]);
                let (v, ccache) = self.critic.forward(&xc)?;
                let scale = 2.0 / (chunk.len() * n) as f64;
                let mut closs = 0.0;
                let dv = Array2::from_shape_fn((chunk.len(), n), |(r, i)| {
                    let e = v[[r, i]] - values.normalize(memory.returns[chunk[r] * n + i]);
                    closs += e * e;
                    scale * e
                });
                let (mut cgrads, _) = self.critic.backward(&ccache, &dv)?;
                clip_global_norm(&mut cgrads, self.config.max_grad_norm);
                self.critic_opt.step(&mut self.critic, &cgrads)?;

                if !loss.is_finite() || !closs.is_finite() {
                    return Err(Error::DivergenceDetected(format!("non-finite PPO loss at epoch {}", self.epoch)));
                }
                actor_loss_sum += loss;
                critic_loss_sum += closs / (chunk.len() * n) as f64;
                batches += 1;
            }
        }
        if !all_finite(self.actor.params()) || !all_finite(self.critic.params()) {
            return Err(Error::DivergenceDetected(format!("non-finite parameters after epoch {}", self.epoch)));
        }
        let b = batches.max(1) as f64;
        Ok((actor_loss_sum / b, critic_loss_sum / b, first_dev.unwrap_or(0.0)))
    }

    /// Train for the configured number of epochs, appending one JSON line per epoch to `log`.
    pub fn train(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<EpisodeLog>> {
        let mut out = Vec::with_capacity(self.config.epochs);
        for _ in 0..self.config.epochs {
            let entry = self.train_epoch()?;
            log::info!(
                "epoch {} return {:.2} signal {:.1} W temp {:.3} C",
                entry.episode,
                entry.mean_return,
                entry.signal_rmse,
                entry.temperature_rmse
            );
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&entry)?)?;
            }
            out.push(entry);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::tests::small_env;
    use crate::neural::{check_gradients, relative_error};

    #[test]
    fn clip_examples() {
        assert!((clipped_surrogate(1.5, 2.0, 0.2) - 1.2 * 2.0).abs() < 1e-12);
        // Negative advantage: the unclipped product is the smaller one.
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (-0.8)).abs() < 1e-12);
        assert!((clipped_surrogate(0.5, -1.0, 0.2) - (0.8f64 * -1.0)).abs() < 1e-12);
        assert_eq!(clipped_surrogate(1.0, 3.0, 0.2), 3.0);
    }

    #[test]
    fn returns() {
        assert_eq!(discounted_returns(&[-2.0], 0.7), vec![-2.0]);
        let g = discounted_returns(&[1.0, 2.0, 3.0], 0.5);
        assert_eq!(g, vec![1.0 + 0.5 * (2.0 + 0.5 * 3.0), 2.0 + 1.5, 3.0]);
    }

    #[test]
    fn ppo_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = 64;
        let logits = Array2::from_shape_fn((b, 2), |_| rng.random_range(-2.0..2.0));
        let actions: Vec<u8> = (0..b).map(|_| rng.random_range(0..2)).collect();
        // Old log-probs near the current ones, some outside the trust region.
        let old: Vec<f64> = (0..b)
            .map(|k| {
                let (l0, l1) = log_softmax_row(logits[[k, 0]], logits[[k, 1]]);
                let lp = if actions[k] == 1 { l1 } else { l0 };
                lp + rng.random_range(-0.5..0.5)
            })
            .collect();
        let adv: Vec<f64> = (0..b).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, grad, _) = ppo_loss(&logits, &actions, &old, &adv, 0.2);
        for k in 0..b {
            for j in 0..2 {
                let mut p = logits.clone();
                p[[k, j]] += 1e-6;
                let mut m = logits.clone();
                m[[k, j]] -= 1e-6;
                let fd = (ppo_loss(&p, &actions, &old, &adv, 0.2).0 - ppo_loss(&m, &actions, &old, &adv, 0.2).0) / 2e-6;
                assert!(relative_error(grad[[k, j]], fd) < 1e-4 || (grad[[k, j]] - fd).abs() < 1e-9, "{} vs {fd}", grad[[k, j]]);
            }
        }
    }

    #[test]
    fn ppo_loss_through_actor_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::new(&[5, 16, 16, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((32, 5), |_| rng.random_range(-1.0..1.0));
        let actions: Vec<u8> = (0..32).map(|_| rng.random_range(0..2)).collect();
        let adv: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = net.predict(&x).unwrap();
        let old: Vec<f64> = (0..32)
            .map(|k| {
                let (l0, l1) = log_softmax_row(logits[[k, 0]], logits[[k, 1]]);
                (if actions[k] == 1 { l1 } else { l0 }) + rng.random_range(-0.1..0.1)
            })
            .collect();
        let (logits, cache) = net.forward(&x).unwrap();
        let (_, dlogits, _) = ppo_loss(&logits, &actions, &old, &adv, 0.2);
        let (g, _) = net.backward(&cache, &dlogits).unwrap();
        let f = |m: &Mlp| ppo_loss(&m.predict(&x).unwrap(), &actions, &old, &adv, 0.2).0;
        let check = check_gradients(&net, &g, f, 100, 1e-5, &mut rng);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    fn quick(kind: AgentKind) -> PpoConfig {
        PpoConfig {
            episode_steps: 60,
            return_tail: 10,
            epochs: 2,
            updates: 2,
            actor_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            ..PpoConfig::for_kind(kind)
        }
    }

    #[test]
    fn first_ratio_is_one_and_training_is_deterministic() {
        for kind in [AgentKind::PpoHe, AgentKind::PpoNc, AgentKind::Tarmac] {
            let run = || {
                let mut t = PpoTrainer::with_env(small_env(4, 2), quick(kind)).unwrap();
                let logs = t.train(None).unwrap();
                (logs, t.policy().net.checksum())
            };
            let (logs, sum) = run();
            for l in &logs {
                assert!(l.initial_ratio_deviation.unwrap() < 1e-9, "{kind:?}: {l:?}");
                assert_eq!(l.steps, 60);
            }
            assert_eq!(run().1, sum);
        }
    }

    #[test]
    fn training_changes_parameters_and_logs_jsonl() {
        let mut t = PpoTrainer::with_env(small_env(3, 2), quick(AgentKind::PpoHe)).unwrap();
        let before = t.policy().net.checksum();
        let mut buf = Vec::new();
        t.train(Some(&mut buf)).unwrap();
        assert_ne!(before, t.policy().net.checksum());
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        let first: EpisodeLog = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first.episode, 0);
    }

    #[test]
    fn resume_from_policy() {
        let mut t = PpoTrainer::with_env(small_env(3, 2), quick(AgentKind::PpoHe)).unwrap();
        t.train_epoch().unwrap();
        let p = t.policy();
        let resumed = PpoTrainer::with_env(small_env(3, 2), quick(AgentKind::PpoHe)).unwrap().with_policy(p.clone()).unwrap();
        assert_eq!(resumed.policy().net, p.net);
        let other = PpoTrainer::with_env(small_env(3, 2), quick(AgentKind::PpoNc)).unwrap();
        assert!(other.with_policy(p).is_err());
    }

    #[test]
    fn dqn_kind_is_rejected() {
        assert!(PpoTrainer::with_env(small_env(3, 2), PpoConfig::for_kind(AgentKind::Dqn)).is_err());
    }
}
