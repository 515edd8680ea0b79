use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{evaluate, rollout, run_parallel, EvalConfig, MetricsReport};
use crate::control::Controller;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::signal::BaseSignalTable;

/// Builds a controller for a given house count.
pub type SizedFactory<'a> = dyn Fn(usize) -> Result<Box<dyn Controller>> + Sync + 'a;

/// Group errors whose mean sits further than this many standard errors from
/// zero are treated as biased.
pub const BIAS_Z: f64 = 4.0;

/// Per-agent RMSE of `k` pooled groups relative to a single group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRatio {
    pub k: usize,
    pub ratio: f64,
    /// `1/√k`.
    pub expected: f64,
    /// False when the group errors are biased and `1/√k` does not apply.
    pub applicable: bool,
}

impl GroupRatio {
    pub fn relative_deviation(&self) -> f64 {
        (self.ratio - self.expected).abs() / self.expected
    }
}

/// `|mean| / (std/√n)` above [`BIAS_Z`] for any group.
pub fn groups_biased(groups: &[Vec<f64>]) -> bool {
    groups.iter().any(|g| {
        let (m, s) = super::mean_std(g);
        let se = s / (g.len() as f64).sqrt();
        if se > 0.0 {
            m.abs() / se > BIAS_Z
        } else {
            m != 0.0
        }
    })
}

/// Per-agent RMSE when the first `k` groups of `group_size` agents are pooled:
/// `RMSE(Σ_g e_g) / (k · group_size)`.
pub fn pooled_per_agent_rmse(groups: &[Vec<f64>], k: usize, group_size: usize) -> Result<f64> {
    if k == 0 || groups.len() < k || group_size == 0 {
        return Err(Error::config("need at least k non-empty groups"));
    }
    let steps = groups[..k].iter().map(Vec::len).min().unwrap_or(0);
    if steps == 0 {
        return Err(Error::config("group error traces are empty"));
    }
    let sq: f64 = (0..steps)
        .map(|t| {
            let e: f64 = groups[..k].iter().map(|g| g[t]).sum();
            e * e
        })
        .sum();
    Ok((sq / steps as f64).sqrt() / (k * group_size) as f64)
}

/// Ratio test on recorded aggregate-error traces, one per independent group.
pub fn group_ratio(groups: &[Vec<f64>], k: usize, group_size: usize) -> Result<GroupRatio> {
    let base = pooled_per_agent_rmse(groups, 1, group_size)?;
    let pooled = pooled_per_agent_rmse(groups, k, group_size)?;
    Ok(GroupRatio {
        k,
        ratio: if base > 0.0 { pooled / base } else { f64::NAN },
        expected: 1.0 / (k as f64).sqrt(),
        applicable: !groups_biased(&groups[..k]),
    })
}

/// Monte-Carlo version of the ratio test with Gaussian group errors
/// `N(bias, σ)`. Each of `k` groups gets its own trace of `steps` samples; the
/// single-group reference is the RMSE averaged over all `k` groups.
pub fn synthetic_group_ratio(k: usize, group_size: usize, sigma: f64, bias: f64, steps: usize, seed: u64) -> Result<GroupRatio> {
    let normal = Normal::new(bias, sigma).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<f64>> = (0..k).map(|_| (0..steps).map(|_| normal.sample(&mut rng)).collect()).collect();
    let single: f64 = (0..k)
        .map(|g| pooled_per_agent_rmse(&groups[g..], 1, group_size))
        .sum::<Result<f64>>()?
        / k as f64;
    let pooled = pooled_per_agent_rmse(&groups, k, group_size)?;
    Ok(GroupRatio {
        k,
        ratio: pooled / single,
        expected: 1.0 / (k as f64).sqrt(),
        applicable: !groups_biased(&groups),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub houses: usize,
    pub signal_rmse: f64,
    pub signal_rmse_std: f64,
    pub temperature_rmse: f64,
    pub max_temperature_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub controller: String,
    pub rows: Vec<ScalingRow>,
    /// Ratio test on independent groups of the smallest size.
    pub groups: Vec<GroupRatio>,
}

/// Aggregate error `P − s` for every step at or after `warmup`.
pub fn aggregate_errors(env: &mut Env, ctrl: &mut dyn Controller, steps: usize, warmup: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps.saturating_sub(warmup));
    let mut k = 0usize;
    let mut sink = |r: &super::TrajectoryRecord| {
        if k >= warmup {
            out.push(r.consumption - r.signal);
        }
        k += 1;
        Ok(())
    };
    rollout(env, ctrl, steps, warmup, Some(&mut sink))?;
    Ok(out)
}

/// Evaluate a controller at each house count, then run the pooled-group ratio
/// test for every `k` in `group_counts` using independent environments of the
/// smallest size (one seed per group).
pub fn scaling_study(
    factory: &SizedFactory<'_>,
    base: &EnvConfig,
    table: Option<Arc<BaseSignalTable>>,
    sizes: &[usize],
    seeds: &[u64],
    group_counts: &[usize],
    eval: &EvalConfig,
) -> Result<ScalingReport> {
    if sizes.is_empty() {
        return Err(Error::config("scaling study needs at least one house count"));
    }
    let table = match table {
        Some(t) => t,
        None => Env::new(base.clone())?.table().clone(),
    };
    let mut rows = Vec::with_capacity(sizes.len());
    let mut name = String::new();
    for &n in sizes {
        let cfg = EnvConfig {
            houses: n,
            ..base.clone()
        };
        let report: MetricsReport = evaluate(&|| factory(n), &cfg, Some(table.clone()), seeds, eval)?;
        name = report.controller.clone();
        rows.push(ScalingRow {
            houses: n,
            signal_rmse: report.mean.signal_rmse,
            signal_rmse_std: report.std.signal_rmse,
            temperature_rmse: report.mean.temperature_rmse,
            max_temperature_rmse: report.mean.max_temperature_rmse,
        });
    }

    let kmax = group_counts.iter().copied().max().unwrap_or(0);
    let mut groups_out = Vec::new();
    if kmax > 0 {
        let n = *sizes.iter().min().unwrap_or(&1);
        let cfg = EnvConfig {
            houses: n,
            ..base.clone()
        };
        let first = seeds.first().copied().unwrap_or(0);
        let traces = run_parallel(eval.jobs, kmax, |g| {
            let seed = first.wrapping_add(g as u64 * 7919);
            let mut env = Env::with_table(EnvConfig { seed, ..cfg.clone() }, table.clone())?;
            env.reset_with_seed(seed)?;
            let mut ctrl = factory(n)?;
            aggregate_errors(&mut env, ctrl.as_mut(), eval.horizon, eval.warmup)
        })?;
        for &k in group_counts {
            groups_out.push(group_ratio(&traces, k, n)?);
        }
    }
    Ok(ScalingReport {
        controller: name,
        rows,
        groups: groups_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_group_ratio_is_one() {
        let r = synthetic_group_ratio(1, 10, 500.0, 0.0, 2000, 3).unwrap();
        assert!((r.ratio - 1.0).abs() < 1e-12);
        assert!(r.applicable);
    }

    #[test]
    fn unbiased_groups_follow_inverse_sqrt() {
        for k in [4, 16] {
            let r = synthetic_group_ratio(k, 10, 500.0, 0.0, 20_000, 11).unwrap();
            assert!(r.applicable);
            assert!(r.relative_deviation() < 0.05, "k={k} ratio {}", r.ratio);
        }
    }

    #[test]
    fn biased_groups_flagged() {
        let r = synthetic_group_ratio(4, 10, 500.0, 400.0, 5000, 5).unwrap();
        assert!(!r.applicable);
        // With a common bias the pooled per-agent error does not shrink like 1/√k.
        assert!(r.ratio > 0.6);
    }

    #[test]
    fn pooled_rmse_by_hand() {
        let groups = vec![vec![1.0, -1.0], vec![1.0, 1.0]];
        assert!((pooled_per_agent_rmse(&groups, 1, 1).unwrap() - 1.0).abs() < 1e-12);
        // Sums are 2 and 0: RMSE √2 over 2 agents.
        assert!((pooled_per_agent_rmse(&groups, 2, 1).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(pooled_per_agent_rmse(&groups, 3, 1).is_err());
    }
}
