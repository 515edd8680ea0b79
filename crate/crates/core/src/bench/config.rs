//! TOML experiment files with `[environment]`, `[agent]` and `[experiment]`
//! sections. Every key is optional; missing keys take the library defaults.
//!
//! ```toml
//! [environment]
//! houses = 50
//! neighbours = 9
//!
//! [environment.ac]
//! lockout_max = 40.0
//!
//! [agent]
//! controller = "bbc"          # bbc | greedy | greedy_available | mpc | policy
//! checkpoint = "runs/ppo.ckpt" # used by `policy`
//!
//! [agent.ppo]
//! episode_steps = 4000
//!
//! [experiment]
//! seeds = "1..10"
//! horizon = 43200
//! warmup = 5000
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::io::parse_seeds;
use super::robustness::RobustnessSpec;
use super::{EvalConfig, DEFAULT_HORIZON, DEFAULT_WARMUP, TIMING_STEPS};
use crate::agents::{DqnConfig, Policy, PolicyController, PpoConfig};
use crate::baselines::{BangBang, Greedy, MpcConfig, MpcController};
use crate::control::Controller;
use crate::env::EnvConfig;
use crate::error::{Error, Result};

/// A seed list written either as an array or as text such as `"1..10"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    One(u64),
    Text(String),
}

impl SeedSpec {
    pub fn resolve(&self) -> Result<Vec<u64>> {
        match self {
            Self::List(v) if v.is_empty() => Err(Error::config("seed list is empty")),
            Self::List(v) => Ok(v.clone()),
            Self::One(s) => Ok(vec![*s]),
            Self::Text(t) => parse_seeds(t),
        }
    }
}

impl Default for SeedSpec {
    fn default() -> Self {
        Self::One(1)
    }
}

/// Named evaluation protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two-day rollouts after a 5000-step warmup.
    Standard,
    /// Short parallel windows for slow centralized solvers: 2-hour rollouts
    /// from random times of day with 0.05 °C initial noise and no warmup.
    Mpc,
}

pub const MPC_WINDOW_STEPS: usize = 1800;
pub const MPC_INIT_NOISE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSection {
    /// `bbc`, `greedy`, `greedy_available`, `mpc`, or `policy` / `policy_sampled`
    /// (a trained checkpoint with argmax or sampled actions).
    pub controller: String,
    pub checkpoint: Option<PathBuf>,
    pub ppo: PpoConfig,
    pub dqn: DqnConfig,
    pub mpc: MpcConfig,
}

impl Default for AgentSection {
    fn default() -> Self {
        Self {
            controller: "bbc".into(),
            checkpoint: None,
            ppo: PpoConfig::default(),
            dqn: DqnConfig::default(),
            mpc: MpcConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: SeedSpec,
    pub preset: Preset,
    pub horizon: usize,
    pub warmup: usize,
    /// Trajectory records kept by `simulate` (every `stride`-th step).
    pub trajectory_stride: usize,
    /// House counts for the scaling study.
    pub sizes: Vec<usize>,
    /// Group counts for the pooled-error ratio test.
    pub group_counts: Vec<usize>,
    pub robustness: RobustnessSpec,
    /// Controllers timed by `timing` (same names as `agent.controller`).
    pub timing_controllers: Vec<String>,
    pub timing_sizes: Vec<usize>,
    pub timing_steps: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seeds: SeedSpec::default(),
            preset: Preset::Standard,
            horizon: DEFAULT_HORIZON,
            warmup: DEFAULT_WARMUP,
            trajectory_stride: 1,
            sizes: vec![10, 50, 250, 1000],
            group_counts: vec![1, 4, 16],
            robustness: RobustnessSpec::default(),
            timing_controllers: vec!["bbc".into(), "greedy".into()],
            timing_sizes: vec![10, 100, 1000],
            timing_steps: TIMING_STEPS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub environment: EnvConfig,
    pub agent: AgentSection,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.environment.validate()?;
        self.experiment.seeds.resolve()?;
        self.experiment.robustness.validate()?;
        let (h, w) = self.eval_window();
        if w >= h {
            return Err(Error::config(format!("warmup {w} must be shorter than the horizon {h}")));
        }
        if self.experiment.trajectory_stride == 0 {
            return Err(Error::config("trajectory_stride must be positive"));
        }
        controller_name(&self.agent.controller)?;
        Ok(())
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.experiment.seeds.resolve()
    }

    fn eval_window(&self) -> (usize, usize) {
        match self.experiment.preset {
            Preset::Standard => (self.experiment.horizon, self.experiment.warmup),
            Preset::Mpc => (MPC_WINDOW_STEPS, 0),
        }
    }

    /// Environment after applying the preset.
    pub fn env_config(&self) -> EnvConfig {
        let mut env = self.environment.clone();
        if self.experiment.preset == Preset::Mpc {
            env.init_noise = MPC_INIT_NOISE;
        }
        env
    }

    pub fn eval_config(&self, jobs: usize) -> EvalConfig {
        let (horizon, warmup) = self.eval_window();
        EvalConfig {
            horizon,
            warmup,
            jobs,
            random_start: self.experiment.preset == Preset::Mpc,
        }
    }

    /// Load the checkpoint when the configured controller needs one.
    pub fn policy(&self) -> Result<Option<Arc<Policy>>> {
        if !controller_name(&self.agent.controller)?.starts_with("policy") {
            return Ok(None);
        }
        let path = self
            .agent
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::config("controller 'policy' needs agent.checkpoint"))?;
        Ok(Some(Arc::new(Policy::load(path)?)))
    }
}

fn controller_name(name: &str) -> Result<&'static str> {
    match name.to_ascii_lowercase().as_str() {
        "bbc" | "bang_bang" | "bang-bang" => Ok("bbc"),
        "greedy" => Ok("greedy"),
        "greedy_available" => Ok("greedy_available"),
        "mpc" => Ok("mpc"),
        "policy" | "checkpoint" => Ok("policy"),
        "policy_sampled" => Ok("policy_sampled"),
        other => Err(Error::config(format!("unknown controller '{other}'"))),
    }
}

/// Build a controller by name. `policy` needs a loaded checkpoint.
pub fn build_controller(name: &str, policy: Option<&Policy>, mpc: &MpcConfig) -> Result<Box<dyn Controller>> {
    Ok(match controller_name(name)? {
        "bbc" => Box::new(BangBang),
        "greedy" => Box::new(Greedy::default()),
        "greedy_available" => Box::new(Greedy::skipping_locked()),
        "mpc" => Box::new(MpcController::new(*mpc)),
        kind => {
            let p = policy.ok_or_else(|| Error::config(format!("controller '{kind}' needs a checkpoint")))?;
            if kind == "policy_sampled" {
                Box::new(PolicyController::sampling(p.clone(), 0))
            } else {
                Box::new(PolicyController::new(p.clone()))
            }
        }
    })
}
