//! One-dimensional multi-octave gradient (Perlin) noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How octave lattice spacing shrinks from one octave to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OctaveScheme {
    /// Octave `k` has period `first / 2^k` (80, 40, 20, 10, 5 s by default).
    #[default]
    Dyadic,
    /// Octave `k` has period `first / (k + 1)` (frequency proportional to octave number).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerlinConfig {
    pub octaves: u32,
    /// Amplitude multiplier between consecutive octaves.
    pub amplitude_ratio: f64,
    /// Length of the reference period, s.
    pub base_period: f64,
    /// Lattice cells of the first octave per reference period.
    pub octave_steps: u32,
    pub scheme: OctaveScheme,
    pub seed: u64,
}

impl Default for PerlinConfig {
    fn default() -> Self {
        Self {
            octaves: 5,
            amplitude_ratio: 0.9,
            base_period: 400.0,
            octave_steps: 5,
            scheme: OctaveScheme::Dyadic,
            seed: 0,
        }
    }
}

impl PerlinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.octaves == 0 {
            return Err(Error::config("perlin noise needs at least one octave"));
        }
        if !(self.amplitude_ratio > 0.0 && self.amplitude_ratio <= 1.0) {
            return Err(Error::config(format!(
                "amplitude ratio must be in (0, 1], got {}",
                self.amplitude_ratio
            )));
        }
        if !(self.base_period > 0.0) || self.octave_steps == 0 {
            return Err(Error::config("perlin base period and octave steps must be positive"));
        }
        Ok(())
    }

    /// Lattice spacing (period) of each octave, s.
    pub fn octave_periods(&self) -> Vec<f64> {
        let first = self.base_period / f64::from(self.octave_steps);
        (0..self.octaves)
            .map(|k| match self.scheme {
                OctaveScheme::Dyadic => first / 2f64.powi(k as i32),
                OctaveScheme::Linear => first / f64::from(k + 1),
            })
            .collect()
    }

    fn amplitudes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.octaves).map(|k| self.amplitude_ratio.powi(k as i32))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Lattice gradient in [-1, 1] for (seed, octave, cell).
fn gradient(seed: u64, octave: u32, cell: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(u64::from(octave).wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ cell as u64));
    // 53 random mantissa bits -> [0, 1) -> [-1, 1)
    let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * unit - 1.0
}

/// Quintic fade `6f⁵ − 15f⁴ + 10f³`.
pub fn fade(f: f64) -> f64 {
    f * f * f * (f * (f * 6.0 - 15.0) + 10.0)
}

/// Single-octave gradient noise on a unit lattice; range [-0.5, 0.5].
fn octave_noise(x: f64, seed: u64, octave: u32) -> f64 {
    let cell = x.floor();
    let f = x - cell;
    let n = cell as i64;
    let g0 = gradient(seed, octave, n);
    let g1 = gradient(seed, octave, n + 1);
    let v0 = g0 * f;
    let v1 = g1 * (f - 1.0);
    v0 + fade(f) * (v1 - v0)
}

/// Multi-octave noise at time `t` (s), normalized to the exact range [-1, 1].
pub fn perlin_1d(t: f64, config: &PerlinConfig) -> f64 {
    let periods = config.octave_periods();
    let mut sum = 0.0;
    let mut total_amp = 0.0;
    for (k, (period, amp)) in periods.iter().zip(config.amplitudes()).enumerate() {
        sum += amp * octave_noise(t / period, config.seed, k as u32);
        total_amp += amp;
    }
    // Each octave spans [-0.5, 0.5].
    (2.0 * sum / total_amp).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_periods() {
        let p = PerlinConfig::default().octave_periods();
        assert_eq!(p, vec![80.0, 40.0, 20.0, 10.0, 5.0]);
        let lin = PerlinConfig {
            scheme: OctaveScheme::Linear,
            ..Default::default()
        }
        .octave_periods();
        assert_eq!(lin[1], 40.0);
        assert!((lin[2] - 80.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn vanishes_on_lattice() {
        let cfg = PerlinConfig {
            octaves: 1,
            seed: 17,
            ..Default::default()
        };
        for k in 0..50 {
            assert_eq!(perlin_1d(80.0 * k as f64, &cfg), 0.0);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = PerlinConfig {
            seed: 99,
            ..Default::default()
        };
        for t in [0.0, 3.7, 123.4, 86_399.0] {
            assert_eq!(perlin_1d(t, &cfg).to_bits(), perlin_1d(t, &cfg).to_bits());
        }
        let other = PerlinConfig { seed: 100, ..cfg };
        assert_ne!(perlin_1d(3.7, &cfg), perlin_1d(3.7, &other));
    }

    #[test]
    fn single_octave_range_is_half() {
        // Bilinear in the two gradients, so extremes sit on gradient corners.
        let mut max: f64 = 0.0;
        for i in 0..=1000 {
            let f = i as f64 / 1000.0;
            for (g0, g1) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                let v0 = g0 * f;
                let v1 = g1 * (f - 1.0);
                max = max.max((v0 + fade(f) * (v1 - v0)).abs());
            }
        }
        assert!((max - 0.5).abs() < 1e-12, "{max}");
    }

    #[test]
    fn zero_mean_over_ten_periods() {
        for seed in 0..5 {
            let cfg = PerlinConfig {
                seed,
                ..Default::default()
            };
            let n = 4000 * 4;
            let mean: f64 = (0..n).map(|i| perlin_1d(i as f64 * 0.25, &cfg)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 0.05, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(PerlinConfig { octaves: 0, ..Default::default() }.validate().is_err());
        assert!(PerlinConfig { amplitude_ratio: 1.5, ..Default::default() }.validate().is_err());
        assert!(PerlinConfig { base_period: 0.0, ..Default::default() }.validate().is_err());
        assert!(PerlinConfig::default().validate().is_ok());
    }
}
