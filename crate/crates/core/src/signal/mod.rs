//! Regulation signal: slowly varying base demand plus a zero-mean
//! high-frequency deviation.

mod perlin;
mod table;

pub use perlin::{fade, perlin_1d, OctaveScheme, PerlinConfig};
pub use table::{
    bang_bang_average_power, build_base_table, default_base_table, BaseSignalTable, GridSpec,
    NodeQuery, TableMetadata, TABLE_FORMAT_VERSION,
};

use serde::{Deserialize, Serialize};

/// Steps between base-demand refreshes (5 simulated minutes at 4 s).
pub const BASE_REFRESH_SECONDS: f64 = 300.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignalConfig {
    pub perlin: PerlinConfig,
    /// Deviation amplitude relative to the base demand.
    pub amplitude: f64,
    /// Multiplier on the interpolated base demand (robustness shifts).
    pub base_scale: f64,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            perlin: PerlinConfig::default(),
            amplitude: 0.9,
            base_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegulationSignal {
    /// Aggregate base demand, W.
    pub base: f64,
    /// Deviation, W.
    pub deviation: f64,
    /// Target consumption `base + deviation`, clamped at 0, W.
    pub value: f64,
}

/// Regulation signal at time `t` for base demand `base` (W).
pub fn signal_at(t: f64, base: f64, config: &SignalConfig) -> RegulationSignal {
    signal_from_noise(base, config.amplitude, perlin_1d(t, &config.perlin))
}

/// `s = Da · (1 + βp·δp)`, clamped at zero.
pub fn signal_from_noise(base: f64, amplitude: f64, noise: f64) -> RegulationSignal {
    let base = base.max(0.0);
    let deviation = base * amplitude * noise;
    RegulationSignal {
        base,
        deviation,
        value: (base + deviation).max(0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composition_examples() {
        assert_eq!(signal_from_noise(5000.0, 0.9, 0.0).value, 5000.0);
        assert!((signal_from_noise(60_000.0, 0.9, 1.0).value - 114_000.0).abs() < 1e-9);
        assert_eq!(signal_from_noise(0.0, 0.9, 0.7).value, 0.0);
        assert_eq!(signal_from_noise(0.0, 0.9, -0.7).value, 0.0);
    }

    #[test]
    fn never_negative() {
        let s = signal_from_noise(1000.0, 1.5, -1.0);
        assert_eq!(s.value, 0.0);
    }

    #[test]
    fn running_mean_tracks_base() {
        // Two simulated days, 4 s steps, constant base demand.
        let cfg = SignalConfig {
            perlin: PerlinConfig { seed: 7, ..Default::default() },
            ..Default::default()
        };
        let base = 30_000.0;
        let window = 75;
        let values: Vec<f64> = (0..43_200).map(|k| signal_at(4.0 * k as f64, base, &cfg).value).collect();
        for chunk in values.chunks(window) {
            let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
            assert!((mean - base).abs() <= 0.12 * base, "window mean {mean}");
        }
    }

    #[test]
    fn noise_bounded_and_smooth() {
        for seed in [0u64, 1, 12345, u64::MAX] {
            let cfg = PerlinConfig { seed, ..Default::default() };
            let mut prev = perlin_1d(0.0, &cfg);
            for k in 1..250_000 {
                let t = 4.0 * k as f64;
                let v = perlin_1d(t, &cfg);
                assert!((-1.0..=1.0).contains(&v));
                assert!((v - prev).abs() < 1.0, "jump at {t}");
                prev = v;
            }
        }
    }
}
