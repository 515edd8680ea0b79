use serde::{Deserialize, Serialize};

use crate::env::Env;

/// Tracking and comfort errors over an evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    /// RMSE of `(P − s)/N`, W.
    pub signal_rmse: f64,
    /// RMSE of `Th − TT` over all agents and steps, °C.
    pub temperature_rmse: f64,
    /// RMSE over steps of `max_i |Th_i − TT|`, °C.
    pub max_temperature_rmse: f64,
}

/// Streaming RMSE accumulator; samples with index below `warmup` are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsAccumulator {
    warmup: usize,
    seen: usize,
    counted: usize,
    agent_samples: usize,
    signal_sq: f64,
    temperature_sq: f64,
    max_sq: f64,
}

impl MetricsAccumulator {
    pub fn new(warmup: usize) -> Self {
        Self {
            warmup,
            seen: 0,
            counted: 0,
            agent_samples: 0,
            signal_sq: 0.0,
            temperature_sq: 0.0,
            max_sq: 0.0,
        }
    }

    /// Add one step given the aggregate power, signal and per-house temperature errors.
    pub fn record_raw(&mut self, consumption: f64, signal: f64, temperature_errors: &[f64]) {
        let index = self.seen;
        self.seen += 1;
        if index < self.warmup {
            return;
        }
        let n = temperature_errors.len().max(1) as f64;
        let e = (consumption - signal) / n;
        self.signal_sq += e * e;
        let mut worst: f64 = 0.0;
        for &d in temperature_errors {
            self.temperature_sq += d * d;
            worst = worst.max(d.abs());
        }
        self.max_sq += worst * worst;
        self.agent_samples += temperature_errors.len();
        self.counted += 1;
    }

    /// Add the environment's current (post-step) state.
    pub fn record(&mut self, env: &Env) {
        let s = env.state();
        let target = env.config().target;
        let errors: Vec<f64> = s.houses.iter().map(|h| h.th - target).collect();
        self.record_raw(s.consumption, s.signal.value, &errors);
    }

    pub fn counted(&self) -> usize {
        self.counted
    }

    pub fn finish(&self) -> Metrics {
        let rms = |sum: f64, count: usize| if count == 0 { 0.0 } else { (sum / count as f64).sqrt() };
        Metrics {
            signal_rmse: rms(self.signal_sq, self.counted),
            temperature_rmse: rms(self.temperature_sq, self.agent_samples),
            max_temperature_rmse: rms(self.max_sq, self.counted),
        }
    }
}

/// Sample mean and standard deviation (n − 1 denominator; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_tracking_is_zero() {
        let mut acc = MetricsAccumulator::new(0);
        for _ in 0..10 {
            acc.record_raw(5000.0, 5000.0, &[0.0, 0.0]);
        }
        assert_eq!(acc.finish(), Metrics::default());
    }

    #[test]
    fn all_off_gives_rms_of_signal() {
        let mut acc = MetricsAccumulator::new(0);
        let signals = [3000.0, 5000.0, 4000.0];
        for s in signals {
            acc.record_raw(0.0, s, &[0.0; 4]);
        }
        let expected = (signals.iter().map(|s| (s / 4.0) * (s / 4.0)).sum::<f64>() / 3.0).sqrt();
        assert!((acc.finish().signal_rmse - expected).abs() < 1e-9);
    }

    #[test]
    fn max_temperature_uses_per_step_maximum() {
        let mut acc = MetricsAccumulator::new(0);
        acc.record_raw(0.0, 0.0, &[0.1, -0.3]);
        acc.record_raw(0.0, 0.0, &[0.2, 0.0]);
        let m = acc.finish();
        assert!((m.max_temperature_rmse - ((0.09 + 0.04) / 2.0f64).sqrt()).abs() < 1e-12);
        assert!((m.temperature_rmse - ((0.01 + 0.09 + 0.04) / 4.0f64).sqrt()).abs() < 1e-12);
        assert!(m.max_temperature_rmse >= m.temperature_rmse);
    }

    #[test]
    fn warmup_samples_do_not_matter() {
        let run = |junk: f64| {
            let mut acc = MetricsAccumulator::new(3);
            for _ in 0..3 {
                acc.record_raw(junk, -junk, &[junk, junk]);
            }
            acc.record_raw(100.0, 50.0, &[0.2, -0.1]);
            acc.finish()
        };
        assert_eq!(run(0.0), run(1e6));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }
}
