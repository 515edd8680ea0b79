//! Deep Q-learning with a shared Q-network and one pooled replay buffer.

use std::io::Write;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{agent_inputs, episode_start, input_dim, validate_policy, AgentKind, Architecture, EpisodeLog, Policy, PolicyNet};
use crate::bench::MetricsAccumulator;
use crate::env::{derive_seed, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::neural::{all_finite, huber, Activation, Adam, AdamConfig, Mlp, Parameterized, Tensor2};

const STREAM_INIT: u64 = 0x2000;
const STREAM_EXPLORE: u64 = 0x2001;
const STREAM_EPISODES: u64 = 0x2002;
const STREAM_VALIDATION: u64 = 0x2003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DqnConfig {
    pub lr: f64,
    pub minibatch: usize,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    /// Multiplicative decay applied after every episode.
    pub epsilon_decay: f64,
    pub epsilon_min: f64,
    pub episodes: usize,
    pub episode_steps: usize,
    pub hidden: Vec<usize>,
    /// Steps between target-network syncs; 0 bootstraps from the online network.
    pub target_period: usize,
    pub updates_per_step: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
    pub random_start: bool,
    pub validation_steps: usize,
    pub validation_warmup: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            minibatch: 256,
            gamma: 0.99,
            buffer_capacity: 65_536,
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_min: 0.01,
            episodes: 200,
            episode_steps: 16_000,
            hidden: vec![100, 100],
            target_period: 0,
            updates_per_step: 1,
            divergence_threshold: 1e6,
            seed: 0,
            random_start: true,
            validation_steps: 0,
            validation_warmup: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.minibatch == 0 || self.buffer_capacity < self.minibatch {
            return Err(Error::config("DQN needs a positive learning rate and a buffer at least one minibatch long"));
        }
        if !(0.0..=1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.epsilon_start)
            || !(0.0..=1.0).contains(&self.epsilon_min)
            || !(0.0..=1.0).contains(&self.epsilon_decay)
        {
            return Err(Error::config("gamma and exploration settings must lie in [0, 1]"));
        }
        if self.episode_steps == 0 {
            return Err(Error::config("episode length must be positive"));
        }
        Ok(())
    }
}

/// `r + γ · max_a Q(õ', a)`.
pub fn bellman_target(reward: f64, gamma: f64, max_next_q: f64) -> f64 {
    reward + gamma * max_next_q
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: bool,
    pub reward: f64,
    pub next: Vec<f64>,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    obs: Vec<f64>,
    next: Vec<f64>,
    actions: Vec<u8>,
    rewards: Vec<f64>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            obs: vec![0.0; capacity * dim],
            next: vec![0.0; capacity * dim],
            actions: vec![0; capacity],
            rewards: vec![0.0; capacity],
            len: 0,
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        if t.obs.len() != self.dim || t.next.len() != self.dim {
            return Err(Error::shape(format!("transition width {} vs buffer width {}", t.obs.len(), self.dim)));
        }
        let k = self.head;
        self.obs[k * self.dim..(k + 1) * self.dim].copy_from_slice(&t.obs);
        self.next[k * self.dim..(k + 1) * self.dim].copy_from_slice(&t.next);
        self.actions[k] = u8::from(t.action);
        self.rewards[k] = t.reward;
        self.head = (self.head + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
        Ok(())
    }

    pub fn get(&self, k: usize) -> Transition {
        Transition {
            obs: self.obs[k * self.dim..(k + 1) * self.dim].to_vec(),
            action: self.actions[k] == 1,
            reward: self.rewards[k],
            next: self.next[k * self.dim..(k + 1) * self.dim].to_vec(),
        }
    }

    /// Distinct slot indices drawn uniformly.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        rand::seq::index::sample(rng, self.len, batch.min(self.len)).into_vec()
    }
}

pub struct DqnTrainer {
    pub config: DqnConfig,
    env: Env,
    q: Mlp,
    target: Option<Mlp>,
    opt: Adam,
    explore: ChaCha8Rng,
    episodes_rng: ChaCha8Rng,
    buffer: ReplayBuffer,
    epsilon: f64,
    episode: usize,
    grad_steps: usize,
    in_dim: usize,
}

impl DqnTrainer {
    pub fn new(env_config: EnvConfig, config: DqnConfig) -> Result<Self> {
        Self::with_env(Env::new(env_config)?, config)
    }

    pub fn with_env(env: Env, config: DqnConfig) -> Result<Self> {
        config.validate()?;
        let in_dim = input_dim(AgentKind::Dqn, env.config().neighbours);
        let mut init = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_INIT));
        let sizes: Vec<usize> = std::iter::once(in_dim).chain(config.hidden.iter().copied()).chain([2]).collect();
        let q = Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut init)?;
        Ok(Self {
            opt: Adam::new(AdamConfig::with_lr(config.lr), &q),
            target: (config.target_period > 0).then(|| q.clone()),
            q,
            explore: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EXPLORE)),
            episodes_rng: ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_EPISODES)),
            buffer: ReplayBuffer::new(config.buffer_capacity, in_dim),
            epsilon: config.epsilon_start,
            episode: 0,
            grad_steps: 0,
            in_dim,
            env,
            config,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn set_epsilon(&mut self, epsilon: f64) {
        self.epsilon = epsilon;
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn q_network(&self) -> &Mlp {
        &self.q
    }

    pub fn policy(&self) -> Policy {
        Policy {
            architecture: Architecture {
                kind: AgentKind::Dqn,
                houses: self.env.n(),
                neighbours: self.env.config().neighbours,
                sizes: self.q.sizes(),
                tarmac: None,
                critic_sizes: Vec::new(),
            },
            net: PolicyNet::Mlp(self.q.clone()),
            critic: None,
            normalization: self.env.config().normalization,
        }
    }

    /// ε-greedy choice per row of `x`.
    pub fn select_actions(&mut self, x: &Tensor2) -> Result<Vec<bool>> {
        let q = self.q.predict(x)?;
        Ok(q.rows()
            .into_iter()
            .map(|r| {
                if self.explore.random::<f64>() < self.epsilon {
                    self.explore.random_bool(0.5)
                } else {
                    r[1] > r[0]
                }
            })
            .collect())
    }

    /// Bellman targets for a batch, bootstrapping from the target network if enabled.
    pub fn targets(&self, rewards: &[f64], next: &Tensor2) -> Result<Vec<f64>> {
        let net = self.target.as_ref().unwrap_or(&self.q);
        let qn = net.predict(next)?;
        Ok(rewards
            .iter()
            .zip(qn.rows())
            .map(|(&r, row)| bellman_target(r, self.config.gamma, row[0].max(row[1])))
            .collect())
    }

    /// One gradient step on a uniformly sampled minibatch; returns the Huber loss.
    pub fn learn(&mut self) -> Result<f64> {
        let idx = self.buffer.sample_indices(self.config.minibatch, &mut self.explore);
        let b = idx.len();
        let d = self.in_dim;
        let obs = Array2::from_shape_fn((b, d), |(r, c)| self.buffer.obs[idx[r] * d + c]);
        let next = Array2::from_shape_fn((b, d), |(r, c)| self.buffer.next[idx[r] * d + c]);
        let rewards: Vec<f64> = idx.iter().map(|&k| self.buffer.rewards[k]).collect();
        let targets = self.targets(&rewards, &next)?;
        let (q, cache) = self.q.forward(&obs)?;
        let chosen: Vec<f64> = idx.iter().enumerate().map(|(r, &k)| q[[r, usize::from(self.buffer.actions[k])]]).collect();
        let (loss, g) = huber(&chosen, &targets);
        if !(loss <= self.config.divergence_threshold) {
            return Err(Error::DivergenceDetected(format!("DQN loss {loss} exceeded the divergence threshold")));
        }
        let mut upstream = Array2::zeros((b, 2));
        for (r, &k) in idx.iter().enumerate() {
            upstream[[r, usize::from(self.buffer.actions[k])]] = g[r];
        }
        let (grads, _) = self.q.backward(&cache, &upstream)?;
        self.opt.step(&mut self.q, &grads)?;
        self.grad_steps += 1;
        if let Some(t) = &mut self.target {
            if self.grad_steps % self.config.target_period == 0 {
                t.clone_from(&self.q);
            }
        }
        Ok(loss)
    }

    pub fn train_episode(&mut self) -> Result<EpisodeLog> {
        let n = self.env.n();
        let seed = derive_seed(self.config.seed ^ 0xd09_0000, self.episode as u64);
        let start = if self.config.random_start {
            episode_start(&mut self.episodes_rng, self.env.config().dt)
        } else {
            self.env.config().start_time
        };
        self.env.reset_at(seed, start)?;
        let mut acc = MetricsAccumulator::new(0);
        let mut return_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut losses = 0usize;
        let (mut x, _) = agent_inputs(&self.env, AgentKind::Dqn);
        for _ in 0..self.config.episode_steps {
            let actions = self.select_actions(&x)?;
            let step = self.env.step(&actions)?;
            if self.env.diverged() {
                return Err(Error::DivergenceDetected("house temperature left the physical range during training".into()));
            }
            acc.record(&self.env);
            let (next, _) = agent_inputs(&self.env, AgentKind::Dqn);
            for i in 0..n {
                self.buffer.push(&Transition {
                    obs: x.row(i).to_vec(),
                    action: actions[i],
                    reward: step.rewards[i],
                    next: next.row(i).to_vec(),
                })?;
            }
            return_sum += step.rewards.iter().sum::<f64>();
            if self.buffer.len() >= self.config.minibatch {
                for _ in 0..self.config.updates_per_step {
                    loss_sum += self.learn()?;
                    losses += 1;
                }
            }
            x = next;
        }
        if !all_finite(self.q.params()) {
            return Err(Error::DivergenceDetected("non-finite Q-network parameters".into()));
        }
        let m = acc.finish();
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
        let log = EpisodeLog {
            episode: self.episode,
            steps: self.config.episode_steps,
            mean_return: return_sum / n as f64,
            signal_rmse: m.signal_rmse,
            temperature_rmse: m.temperature_rmse,
            max_temperature_rmse: m.max_temperature_rmse,
            validation,
            loss: (losses > 0).then(|| loss_sum / losses as f64),
            critic_loss: None,
            epsilon: Some(self.epsilon),
            initial_ratio_deviation: None,
        };
        self.epsilon = (self.epsilon * self.config.epsilon_decay).max(self.config.epsilon_min);
        self.episode += 1;
        Ok(log)
    }

    pub fn train(&mut self, mut log: Option<&mut dyn Write>) -> Result<Vec<EpisodeLog>> {
        let mut out = Vec::with_capacity(self.config.episodes);
        for _ in 0..self.config.episodes {
            let entry = self.train_episode()?;
            log::info!("episode {} return {:.2} eps {:.3}", entry.episode, entry.mean_return, self.epsilon);
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
    use crate::neural::check_gradients;

    fn quick() -> DqnConfig {
        DqnConfig {
            episode_steps: 50,
            episodes: 2,
            minibatch: 32,
            buffer_capacity: 256,
            hidden: vec![16, 16],
            ..DqnConfig::default()
        }
    }

    #[test]
    fn bellman_examples() {
        assert!((bellman_target(-0.5, 0.99, -10.0) - (-10.4)).abs() < 1e-12);
        assert_eq!(bellman_target(-0.3, 0.0, 123.0), -0.3);
    }

    #[test]
    fn zero_gamma_targets_are_rewards() {
        let t = DqnTrainer::with_env(small_env(3, 2), DqnConfig { gamma: 0.0, ..quick() }).unwrap();
        let next = Array2::from_elem((3, input_dim(AgentKind::Dqn, 2)), 0.3);
        assert_eq!(t.targets(&[-1.0, -2.0, -3.0], &next).unwrap(), vec![-1.0, -2.0, -3.0]);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut t = DqnTrainer::with_env(small_env(1, 0), quick()).unwrap();
        t.set_epsilon(1.0);
        let x = Array2::from_elem((1, input_dim(AgentKind::Dqn, 0)), 0.5);
        let on = (0..2000).filter(|_| t.select_actions(&x).unwrap()[0]).count() as f64;
        // χ² with one degree of freedom; 6.63 is the 1% critical value.
        let chi2 = 2.0 * (on - 1000.0).powi(2) / 1000.0;
        assert!(chi2 < 6.63, "{on} ON of 2000");
    }

    #[test]
    fn buffer_wraps_and_samples_distinct() {
        let mut b = ReplayBuffer::new(4, 2);
        for k in 0..6 {
            b.push(&Transition {
                obs: vec![k as f64; 2],
                action: k % 2 == 0,
                reward: k as f64,
                next: vec![0.0; 2],
            })
            .unwrap();
        }
        assert_eq!(b.len(), 4);
        assert_eq!(b.get(0).reward, 4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = b.sample_indices(4, &mut rng);
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(b.push(&Transition { obs: vec![0.0], action: false, reward: 0.0, next: vec![0.0] }).is_err());
    }

    #[test]
    fn dqn_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Mlp::new(&[6, 16, 16, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let x = Array2::from_shape_fn((40, 6), |_| rng.random_range(-1.0..1.0));
        let actions: Vec<usize> = (0..40).map(|_| rng.random_range(0..2)).collect();
        let targets: Vec<f64> = (0..40).map(|_| rng.random_range(-3.0..3.0)).collect();
        let loss = |m: &Mlp| {
            let q = m.predict(&x).unwrap();
            let chosen: Vec<f64> = actions.iter().enumerate().map(|(r, &a)| q[[r, a]]).collect();
            huber(&chosen, &targets).0
        };
        let (q, cache) = net.forward(&x).unwrap();
        let chosen: Vec<f64> = actions.iter().enumerate().map(|(r, &a)| q[[r, a]]).collect();
        let (_, g) = huber(&chosen, &targets);
        let mut up = Array2::zeros((40, 2));
        for (r, &a) in actions.iter().enumerate() {
            up[[r, a]] = g[r];
        }
        let (grads, _) = net.backward(&cache, &up).unwrap();
        let check = check_gradients(&net, &grads, loss, 100, 1e-5, &mut rng);
        assert!(check.max_rel_error < 1e-4, "{check:?}");
    }

    #[test]
    fn training_runs_decays_epsilon_and_is_deterministic() {
        let run = || {
            let mut t = DqnTrainer::with_env(small_env(3, 2), quick()).unwrap();
            let logs = t.train(None).unwrap();
            assert!((t.epsilon() - 0.995 * 0.995).abs() < 1e-12);
            assert_eq!(t.buffer().len(), 256);
            (logs.len(), t.q_network().checksum())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn target_network_option() {
        let mut t = DqnTrainer::with_env(small_env(3, 2), DqnConfig { target_period: 5, ..quick() }).unwrap();
        t.train_episode().unwrap();
        assert!(t.target.is_some());
    }

    #[test]
    fn divergence_is_reported() {
        let mut t = DqnTrainer::with_env(small_env(3, 2), DqnConfig { divergence_threshold: -1.0, ..quick() }).unwrap();
        assert!(matches!(t.train_episode(), Err(Error::DivergenceDetected(_))));
    }
}
