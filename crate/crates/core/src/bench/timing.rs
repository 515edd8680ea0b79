use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::scaling::SizedFactory;
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::signal::BaseSignalTable;

pub const TIMING_STEPS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub controller: String,
    pub houses: usize,
    pub decentralized: bool,
    /// Median wall time of one `act` call for the whole aggregation, s.
    pub step_seconds: f64,
    /// Per-agent time for decentralized controllers, whole-system time otherwise, s.
    pub selection_seconds: f64,
    /// `selection_seconds` summed over the measured steps (100 simulated seconds at 4 s).
    pub window_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Time action selection of each controller at each size over `steps` steps
/// of a fresh environment. Environment stepping is not timed.
pub fn timing_report(
    controllers: &[(&str, &SizedFactory<'_>)],
    base: &EnvConfig,
    table: Option<Arc<BaseSignalTable>>,
    sizes: &[usize],
    steps: usize,
) -> Result<Vec<TimingRow>> {
    if steps == 0 {
        return Err(Error::config("timing needs at least one step"));
    }
    let table = match table {
        Some(t) => t,
        None => Env::new(base.clone())?.table().clone(),
    };
    let mut rows = Vec::new();
    for (label, factory) in controllers {
        for &n in sizes {
            let cfg = EnvConfig {
                houses: n,
                neighbours: base.neighbours.min(n.saturating_sub(1)),
                ..base.clone()
            };
            let mut env = Env::with_table(cfg, table.clone())?;
            env.reset()?;
            let mut ctrl = factory(n)?;
            ctrl.reset(&env)?;
            // One untimed call to settle allocations and caches.
            let warm = ctrl.act(&env)?;
            env.step(&warm)?;
            let mut samples = Vec::with_capacity(steps);
            for _ in 0..steps {
                let t0 = Instant::now();
                let a = ctrl.act(&env)?;
                samples.push(t0.elapsed().as_secs_f64());
                env.step(&a)?;
            }
            let decentralized = ctrl.is_decentralized();
            let total: f64 = samples.iter().sum();
            let step_seconds = median(samples);
            let per = if decentralized { n as f64 } else { 1.0 };
            rows.push(TimingRow {
                controller: label.to_string(),
                houses: n,
                decentralized,
                step_seconds,
                selection_seconds: step_seconds / per,
                window_seconds: total / per,
            });
        }
    }
    Ok(rows)
}
