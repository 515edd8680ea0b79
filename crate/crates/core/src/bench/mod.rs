//! Evaluation protocol, scaling and robustness studies, timing and the
//! command-line plumbing around them.

pub mod config;
pub mod io;
mod metrics;
pub mod robustness;
pub mod scaling;
pub mod timing;

pub use config::{ExperimentConfig, ExperimentSection, AgentSection};
pub use metrics::{mean_std, Metrics, MetricsAccumulator};
pub use robustness::{robustness_suite, Disturbance, RobustnessRow, RobustnessSpec};
pub use scaling::{group_ratio, scaling_study, synthetic_group_ratio, GroupRatio, ScalingReport, ScalingRow, SizedFactory};
pub use timing::{timing_report, TimingRow, TIMING_STEPS};

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::env::{derive_seed, Env, EnvConfig};
use crate::error::{Error, Result};
use crate::signal::BaseSignalTable;

/// Two days at 4 s.
pub const DEFAULT_HORIZON: usize = 43_200;
pub const DEFAULT_WARMUP: usize = 5_000;

/// One simulated step as written to trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub time: f64,
    pub signal: f64,
    pub consumption: f64,
    pub outdoor: f64,
    pub th: Vec<f64>,
    pub on: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn from_env(env: &Env) -> Self {
        let s = env.state();
        Self {
            step: s.step,
            time: s.time,
            signal: s.signal.value,
            consumption: s.consumption,
            outdoor: env.outdoor_temperature(),
            th: s.houses.iter().map(|h| h.th).collect(),
            on: s.units.iter().map(|u| u.on).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub metrics: Metrics,
    pub steps: usize,
    /// Wall time spent inside `Controller::act`, s.
    pub decision_seconds: f64,
}

pub type TrajectorySink<'a> = &'a mut dyn FnMut(&TrajectoryRecord) -> Result<()>;

/// Run `ctrl` on `env` (already reset) for `steps` steps.
pub fn rollout(
    env: &mut Env,
    ctrl: &mut dyn Controller,
    steps: usize,
    warmup: usize,
    mut sink: Option<TrajectorySink<'_>>,
) -> Result<RolloutResult> {
    ctrl.reset(env)?;
    let mut acc = MetricsAccumulator::new(warmup);
    let mut decision = 0.0;
    for _ in 0..steps {
        let t0 = Instant::now();
        let actions = ctrl.act(env)?;
        decision += t0.elapsed().as_secs_f64();
        env.step(&actions)?;
        if env.diverged() {
            return Err(Error::DivergenceDetected(format!(
                "house temperature left the physical range at step {}",
                env.state().step
            )));
        }
        acc.record(env);
        if let Some(s) = sink.as_mut() {
            s(&TrajectoryRecord::from_env(env))?;
        }
    }
    Ok(RolloutResult {
        metrics: acc.finish(),
        steps,
        decision_seconds: decision,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub controller: String,
    pub houses: usize,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: Metrics,
    /// Sample standard deviation over seeds (n − 1 denominator).
    pub std: Metrics,
}

impl MetricsReport {
    pub fn from_seeds(controller: String, houses: usize, per_seed: Vec<SeedMetrics>) -> Self {
        let col = |f: fn(&Metrics) -> f64| -> (f64, f64) {
            let v: Vec<f64> = per_seed.iter().map(|s| f(&s.metrics)).collect();
            mean_std(&v)
        };
        let (sm, ss) = col(|m| m.signal_rmse);
        let (tm, ts) = col(|m| m.temperature_rmse);
        let (xm, xs) = col(|m| m.max_temperature_rmse);
        Self {
            controller,
            houses,
            per_seed,
            mean: Metrics {
                signal_rmse: sm,
                temperature_rmse: tm,
                max_temperature_rmse: xm,
            },
            std: Metrics {
                signal_rmse: ss,
                temperature_rmse: ts,
                max_temperature_rmse: xs,
            },
        }
    }
}

/// Builds a fresh controller for each independent run.
pub type ControllerFactory<'a> = dyn Fn() -> Result<Box<dyn Controller>> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub horizon: usize,
    pub warmup: usize,
    /// Worker threads for independent seeds (0 = all cores).
    pub jobs: usize,
    /// Start each seed's rollout at a seed-dependent time of day.
    pub random_start: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            warmup: DEFAULT_WARMUP,
            jobs: 1,
            random_start: false,
        }
    }
}

/// Seed-dependent start time on the step grid within one day.
pub fn start_time_for_seed(seed: u64, dt: f64) -> f64 {
    let steps_per_day = (86_400.0 / dt).floor().max(1.0) as u64;
    (derive_seed(seed, STREAM_START) % steps_per_day) as f64 * dt
}

const STREAM_START: u64 = 0x2000;

pub(crate) fn run_parallel<T: Send>(jobs: usize, n: usize, f: impl Fn(usize) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
    if jobs == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs) // 0 lets rayon pick the core count
        .build()
        .map_err(|e| Error::config(e.to_string()))?;
    pool.install(|| (0..n).into_par_iter().map(f).collect())
}

/// Evaluate a controller on one environment configuration over several seeds.
pub fn evaluate(
    factory: &ControllerFactory<'_>,
    env_config: &EnvConfig,
    table: Option<Arc<BaseSignalTable>>,
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<MetricsReport> {
    env_config.validate()?;
    let table = match table {
        Some(t) => t,
        None => Env::new(env_config.clone())?.table().clone(),
    };
    let mut name = String::new();
    let per_seed = run_parallel(eval.jobs, seeds.len(), |k| {
        let seed = seeds[k];
        let mut env = Env::with_table(EnvConfig { seed, ..env_config.clone() }, table.clone())?;
        if eval.random_start {
            env.reset_at(seed, start_time_for_seed(seed, env_config.dt))?;
        } else {
            env.reset_with_seed(seed)?;
        }
        let mut ctrl = factory()?;
        let r = rollout(&mut env, ctrl.as_mut(), eval.horizon, eval.warmup, None)?;
        Ok(SeedMetrics { seed, metrics: r.metrics })
    })?;
    if let Ok(c) = factory() {
        name = c.name();
    }
    Ok(MetricsReport::from_seeds(name, env_config.houses, per_seed))
}
