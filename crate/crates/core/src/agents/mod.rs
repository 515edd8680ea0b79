//! Learned decentralized controllers with a shared parameter vector:
//! DQN and PPO over hand-engineered messages, PPO without messages, and PPO
//! with learned attention-based messages. Training is centralized; deployment
//! picks each agent's action from its own inputs, by argmax or by sampling.

mod dqn;
mod ppo;
mod tarmac;

pub use dqn::{bellman_target, DqnConfig, DqnTrainer, ReplayBuffer, Transition};
pub use ppo::{clipped_surrogate, discounted_returns, ppo_loss, PpoConfig, PpoTrainer};
pub use tarmac::{TarmacActor, TarmacCache, TarmacConfig};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::env::{derive_seed, Env, ObsNormalization, HE_MESSAGE_LEN, OBS_LEN};
use crate::error::{Error, Result};
use crate::neural::{Activation, Checkpoint, Mlp, Parameterized, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Dqn,
    PpoHe,
    PpoNc,
    Tarmac,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dqn => "dqn",
            Self::PpoHe => "ppo_he",
            Self::PpoNc => "ppo_nc",
            Self::Tarmac => "tarmac",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dqn" => Ok(Self::Dqn),
            "ppo_he" | "he" | "ppo" => Ok(Self::PpoHe),
            "ppo_nc" | "nc" => Ok(Self::PpoNc),
            "tarmac" | "tarmac_ppo" => Ok(Self::Tarmac),
            other => Err(Error::config(format!("unknown agent '{other}'"))),
        }
    }

    /// Whether the input carries the fixed-layout hand-engineered messages.
    pub fn uses_he_messages(self) -> bool {
        matches!(self, Self::Dqn | Self::PpoHe)
    }
}

/// Per-agent network inputs for the current step plus, for attention agents,
/// the rows each agent hears from.
pub fn agent_inputs(env: &Env, kind: AgentKind) -> (Tensor2, Vec<Vec<usize>>) {
    let n = env.n();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| if kind.uses_he_messages() { env.he_features(i) } else { env.features(i) })
        .collect();
    let cols = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = Array2::from_shape_vec((n, cols), flat).expect("rows share a layout");
    let senders = if kind == AgentKind::Tarmac {
        (0..n).map(|i| env.received_from(i)).collect()
    } else {
        vec![Vec::new(); n]
    };
    (x, senders)
}

/// All agents' own features concatenated, the centralized critic's input.
pub fn critic_input(env: &Env) -> Vec<f64> {
    (0..env.n()).flat_map(|i| env.features(i)).collect()
}

pub fn input_dim(kind: AgentKind, neighbours: usize) -> usize {
    if kind.uses_he_messages() {
        OBS_LEN + HE_MESSAGE_LEN * neighbours
    } else {
        OBS_LEN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyNet {
    Mlp(Mlp),
    Tarmac(TarmacActor),
}

impl PolicyNet {
    pub fn logits(&self, x: &Tensor2, senders: &[Vec<usize>]) -> Result<Tensor2> {
        match self {
            Self::Mlp(m) => m.predict(x),
            Self::Tarmac(t) => t.predict(x, senders),
        }
    }
}

impl Parameterized for PolicyNet {
    fn params(&self) -> Vec<&Tensor2> {
        match self {
            Self::Mlp(m) => m.params(),
            Self::Tarmac(t) => t.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        match self {
            Self::Mlp(m) => m.params_mut(),
            Self::Tarmac(t) => t.params_mut(),
        }
    }
}

/// Layout needed to rebuild networks from a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kind: AgentKind,
    /// Houses during training.
    pub houses: usize,
    /// Neighbours during training.
    pub neighbours: usize,
    /// Layer sizes of an MLP policy (Q-network or actor).
    #[serde(default)]
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub tarmac: Option<TarmacConfig>,
    /// Layer sizes of the critic, stored after the policy tensors.
    #[serde(default)]
    pub critic_sizes: Vec<usize>,
}

/// A trained policy ready for deployment.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub architecture: Architecture,
    pub net: PolicyNet,
    /// Kept for resuming training; unused at deployment.
    pub critic: Option<Mlp>,
    /// Observation scaling the networks were trained with.
    pub normalization: ObsNormalization,
}

fn mlp_from_params(sizes: &[usize], hidden: Activation, output: Activation, params: &[Tensor2]) -> Result<Mlp> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Mlp::new(sizes, hidden, output, &mut rng)?;
    m.load_params(params)?;
    Ok(m)
}

impl Policy {
    pub fn kind(&self) -> AgentKind {
        self.architecture.kind
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut params = self.net.to_params();
        if let Some(c) = &self.critic {
            params.extend(c.to_params());
        }
        Ok(Checkpoint::new(
            self.kind().name(),
            serde_json::to_value(&self.architecture)?,
            self.normalization,
            params,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let architecture: Architecture = serde_json::from_value(ck.header.architecture.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("bad architecture descriptor: {e}")))?;
        if AgentKind::parse(&ck.header.kind)? != architecture.kind {
            return Err(Error::IncompatibleCheckpoint("kind does not match architecture".into()));
        }
        let bad = |e: Error| Error::IncompatibleCheckpoint(e.to_string());
        let (net, used) = match architecture.kind {
            AgentKind::Tarmac => {
                let cfg = architecture
                    .tarmac
                    .ok_or_else(|| Error::IncompatibleCheckpoint("missing attention sizes".into()))?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let mut t = TarmacActor::new(OBS_LEN, cfg, &mut rng).map_err(bad)?;
                let count = t.params().len();
                if ck.params.len() < count {
                    return Err(Error::IncompatibleCheckpoint("too few tensors".into()));
                }
                t.load_params(&ck.params[..count]).map_err(bad)?;
                (PolicyNet::Tarmac(t), count)
            }
            _ => {
                let count = 2 * (architecture.sizes.len().saturating_sub(1));
                if ck.params.len() < count {
                    return Err(Error::IncompatibleCheckpoint("too few tensors".into()));
                }
                let m = mlp_from_params(&architecture.sizes, Activation::Relu, Activation::Identity, &ck.params[..count])
                    .map_err(bad)?;
                (PolicyNet::Mlp(m), count)
            }
        };
        let rest = &ck.params[used..];
        let critic = if architecture.critic_sizes.is_empty() {
            if !rest.is_empty() {
                return Err(Error::IncompatibleCheckpoint("unexpected trailing tensors".into()));
            }
            None
        } else {
            Some(mlp_from_params(&architecture.critic_sizes, Activation::Relu, Activation::Identity, rest).map_err(bad)?)
        };
        Ok(Self {
            architecture,
            net,
            critic,
            normalization: ck.header.normalization,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Reject environments whose input layout the policy cannot consume.
    pub fn check_env(&self, env: &Env) -> Result<()> {
        let arch = &self.architecture;
        if arch.kind.uses_he_messages() && env.config().neighbours != arch.neighbours {
            return Err(Error::IncompatibleCheckpoint(format!(
                "hand-engineered messages need the training neighbour count {} at deployment, got {}",
                arch.neighbours,
                env.config().neighbours
            )));
        }
        if env.config().normalization != self.normalization {
            return Err(Error::IncompatibleCheckpoint(
                "environment observation normalization differs from the one used in training".into(),
            ));
        }
        Ok(())
    }

    pub fn logits(&self, env: &Env) -> Result<Tensor2> {
        let (x, senders) = agent_inputs(env, self.kind());
        self.net.logits(&x, &senders)
    }

    /// Argmax action per agent (ties go to OFF).
    pub fn greedy_actions(&self, env: &Env) -> Result<Vec<bool>> {
        let logits = self.logits(env)?;
        Ok(logits.rows().into_iter().map(|r| r[1] > r[0]).collect())
    }
}

/// Deploys a [`Policy`] as a [`Controller`].
///
/// By default each agent takes its argmax action. `sampling` draws actions
/// from the policy distribution instead, seeded per episode from the given
/// seed and the environment seed.
#[derive(Debug, Clone)]
pub struct PolicyController {
    pub policy: Policy,
    pub sampling: Option<u64>,
    rng: ChaCha8Rng,
}

impl PolicyController {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            sampling: None,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn sampling(policy: Policy, seed: u64) -> Self {
        Self {
            sampling: Some(seed),
            ..Self::new(policy)
        }
    }
}

impl Controller for PolicyController {
    fn name(&self) -> String {
        let name = self.policy.kind().name();
        if self.sampling.is_some() {
            format!("{name}_sampled")
        } else {
            name.into()
        }
    }

    fn is_decentralized(&self) -> bool {
        true
    }

    fn reset(&mut self, env: &Env) -> Result<()> {
        if let Some(seed) = self.sampling {
            self.rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, env.config().seed));
        }
        self.policy.check_env(env)
    }

    fn act(&mut self, env: &Env) -> Result<Vec<bool>> {
        if self.sampling.is_none() {
            return self.policy.greedy_actions(env);
        }
        let logits = self.policy.logits(env)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|r| self.rng.random::<f64>() < 1.0 / (1.0 + (r[0] - r[1]).exp()))
            .collect())
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    /// Mean over agents of the undiscounted episode reward sum.
    pub mean_return: f64,
    pub signal_rmse: f64,
    pub temperature_rmse: f64,
    pub max_temperature_rmse: f64,
    /// Greedy-policy rollout on a fixed validation seed, when enabled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<crate::bench::Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Largest |ratio − 1| on the first minibatch of the epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_ratio_deviation: Option<f64>,
}

/// Start time for a training episode: a uniformly drawn step within one day.
pub(crate) fn episode_start(rng: &mut impl rand::Rng, dt: f64) -> f64 {
    let steps_per_day = (86_400.0 / dt).floor() as u64;
    rng.random_range(0..steps_per_day.max(1)) as f64 * dt
}

/// Greedy rollout of `policy` on a fresh copy of `env` for validation logging.
pub(crate) fn validate_policy(env: &Env, policy: &Policy, seed: u64, steps: usize, warmup: usize) -> Result<crate::bench::Metrics> {
    let mut env = env.clone();
    env.reset_with_seed(seed)?;
    let mut ctrl = PolicyController::new(policy.clone());
    crate::bench::rollout(&mut env, &mut ctrl, steps, warmup, None).map(|r| r.metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::signal::{bang_bang_average_power, build_base_table, GridSpec};
    use std::sync::Arc;

    pub(crate) fn small_env(n: usize, nc: usize) -> Env {
        let table = Arc::new(build_base_table(&GridSpec::small(), bang_bang_average_power).unwrap());
        let cfg = EnvConfig {
            neighbours: nc,
            ..EnvConfig::with_houses(n)
        };
        Env::with_table(cfg, table).unwrap()
    }

    #[test]
    fn kinds_parse() {
        for k in [AgentKind::Dqn, AgentKind::PpoHe, AgentKind::PpoNc, AgentKind::Tarmac] {
            assert_eq!(AgentKind::parse(k.name()).unwrap(), k);
        }
        assert!(AgentKind::parse("a3c").is_err());
    }

    #[test]
    fn input_layouts() {
        let env = small_env(5, 2);
        let (x, s) = agent_inputs(&env, AgentKind::PpoHe);
        assert_eq!(x.dim(), (5, input_dim(AgentKind::PpoHe, 2)));
        assert!(s.iter().all(Vec::is_empty));
        let (x, s) = agent_inputs(&env, AgentKind::Tarmac);
        assert_eq!(x.dim(), (5, OBS_LEN));
        assert_eq!(s[0].len(), 2);
        assert_eq!(critic_input(&env).len(), 5 * OBS_LEN);
    }

    fn mlp_policy(kind: AgentKind, n: usize, nc: usize) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sizes = vec![input_dim(kind, nc), 16, 16, 2];
        Policy {
            architecture: Architecture {
                kind,
                houses: n,
                neighbours: nc,
                sizes: sizes.clone(),
                tarmac: None,
                critic_sizes: vec![n * OBS_LEN, 8, n],
            },
            net: PolicyNet::Mlp(Mlp::new(&sizes, Activation::Relu, Activation::Identity, &mut rng).unwrap()),
            critic: Some(Mlp::new(&[n * OBS_LEN, 8, n], Activation::Relu, Activation::Identity, &mut rng).unwrap()),
            normalization: ObsNormalization::default(),
        }
    }

    fn tarmac_policy(n: usize, nc: usize) -> Policy {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = TarmacConfig::default();
        Policy {
            architecture: Architecture {
                kind: AgentKind::Tarmac,
                houses: n,
                neighbours: nc,
                sizes: Vec::new(),
                tarmac: Some(cfg),
                critic_sizes: Vec::new(),
            },
            net: PolicyNet::Tarmac(TarmacActor::new(OBS_LEN, cfg, &mut rng).unwrap()),
            critic: None,
            normalization: ObsNormalization::default(),
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        for p in [mlp_policy(AgentKind::PpoHe, 4, 2), tarmac_policy(4, 3)] {
            let ck = p.to_checkpoint().unwrap();
            let bytes = ck.to_bytes().unwrap();
            let back = Policy::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn he_policy_rejects_other_neighbour_counts() {
        let mut ctrl = PolicyController::new(mlp_policy(AgentKind::PpoHe, 10, 9));
        let env = small_env(10, 7);
        assert!(matches!(ctrl.reset(&env), Err(Error::IncompatibleCheckpoint(_))));
        let env = small_env(10, 9);
        ctrl.reset(&env).unwrap();
        assert_eq!(ctrl.act(&env).unwrap().len(), 10);
    }

    #[test]
    fn sampled_actions_repeat_per_episode() {
        let env = small_env(40, 3);
        let rollout = |ctrl: &mut PolicyController| {
            ctrl.reset(&env).unwrap();
            (0..5).flat_map(|_| ctrl.act(&env).unwrap()).collect::<Vec<_>>()
        };
        let mut a = PolicyController::sampling(tarmac_policy(40, 3), 1);
        let first = rollout(&mut a);
        assert_eq!(rollout(&mut a), first);
        assert_eq!(rollout(&mut PolicyController::sampling(tarmac_policy(40, 3), 1)), first);
        assert_ne!(rollout(&mut PolicyController::sampling(tarmac_policy(40, 3), 2)), first);
        assert_eq!(a.name(), "tarmac_sampled");
    }

    #[test]
    fn normalization_must_match() {
        let mut p = mlp_policy(AgentKind::PpoNc, 10, 0);
        p.normalization.temperature_offset = 20.0;
        let mut ctrl = PolicyController::new(p.clone());
        assert!(matches!(ctrl.reset(&small_env(10, 0)), Err(Error::IncompatibleCheckpoint(_))));
        let back = Policy::from_checkpoint(&p.to_checkpoint().unwrap()).unwrap();
        assert_eq!(back.normalization.temperature_offset, 20.0);
    }

    #[test]
    fn tarmac_and_nc_policies_run_on_other_sizes() {
        let mut t = PolicyController::new(tarmac_policy(10, 9));
        let env = small_env(12, 7);
        t.reset(&env).unwrap();
        assert_eq!(t.act(&env).unwrap().len(), 12);
        let mut nc = PolicyController::new(mlp_policy(AgentKind::PpoNc, 10, 0));
        let env = small_env(25, 3);
        nc.reset(&env).unwrap();
        assert_eq!(nc.act(&env).unwrap().len(), 25);
    }

    #[test]
    fn mismatched_checkpoints_are_rejected() {
        let p = mlp_policy(AgentKind::PpoHe, 4, 2);
        let mut ck = p.to_checkpoint().unwrap();
        ck.params.pop();
        ck.header.shapes.pop();
        assert!(matches!(Policy::from_checkpoint(&ck), Err(Error::IncompatibleCheckpoint(_))));
        let mut ck = p.to_checkpoint().unwrap();
        ck.header.kind = "tarmac".into();
        assert!(Policy::from_checkpoint(&ck).is_err());
    }
}
