use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvac::AcParams;
use crate::signal::SignalConfig;
use crate::thermal::{SolarConfig, ThermalParams};

/// Daily sinusoidal outdoor temperature shared by every house.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutdoorProfile {
    /// Daily minimum, °C.
    pub min: f64,
    /// Daily maximum, °C.
    pub max: f64,
    /// Hour at which the minimum is reached; the maximum follows 12 h later.
    pub min_hour: f64,
    /// Constant shift applied to the whole profile, °C.
    pub offset: f64,
}

impl Default for OutdoorProfile {
    fn default() -> Self {
        Self {
            min: 28.0,
            max: 34.0,
            min_hour: 6.0,
            offset: 0.0,
        }
    }
}

impl OutdoorProfile {
    /// Outdoor temperature at `t` seconds after midnight of day 0.
    pub fn at(&self, t: f64) -> f64 {
        let hour = t / 3600.0;
        let phase = 2.0 * std::f64::consts::PI * (hour - self.min_hour) / 24.0 - std::f64::consts::FRAC_PI_2;
        0.5 * (self.min + self.max) + 0.5 * (self.max - self.min) * phase.sin() + self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub temperature: f64,
    pub signal: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            signal: 3e-7,
        }
    }
}

/// Constants dividing the raw observation fields before they reach a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsNormalization {
    /// Temperatures are divided by this, °C.
    pub temperature: f64,
    /// Subtracted from absolute temperatures before dividing, °C. Differences
    /// such as `Th − TT` in messages are only divided.
    pub temperature_offset: f64,
    /// Lockout is divided by this, s (the nominal lockout duration).
    pub lockout: f64,
    /// Per-agent powers are divided by this, W (the nominal rated power).
    pub power: f64,
}

impl Default for ObsNormalization {
    fn default() -> Self {
        let ac = AcParams::default();
        Self {
            temperature: 30.0,
            temperature_offset: 0.0,
            lockout: ac.lockout_max,
            power: ac.power(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    /// Number of houses N.
    pub houses: usize,
    /// Timestep, s.
    pub dt: f64,
    /// Target indoor temperature, °C.
    pub target: f64,
    pub outdoor: OutdoorProfile,
    /// Simulated seconds after midnight at reset.
    pub start_time: f64,
    pub day_of_year: u32,
    pub reward: RewardWeights,
    /// Neighbours each agent talks to (Nc).
    pub neighbours: usize,
    /// Std of the |Gaussian| initial temperature offset above target, °C.
    pub init_noise: f64,
    pub thermal: ThermalParams,
    /// Relative std of per-house thermal parameter noise (0 = homogeneous).
    pub thermal_rel_std: f64,
    pub ac: AcParams,
    /// If non-empty, each house draws its cooling capacity uniformly from here.
    pub capacity_choices: Vec<f64>,
    /// If non-empty, each house draws its lockout duration uniformly from here.
    pub lockout_choices: Vec<f64>,
    pub solar: SolarConfig,
    pub signal: SignalConfig,
    /// Probability each message is lost at each step.
    pub comm_drop_prob: f64,
    pub normalization: ObsNormalization,
    /// Base-demand table file; the built-in default grid is used when absent.
    pub base_table: Option<PathBuf>,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            houses: 10,
            dt: 4.0,
            target: 20.0,
            outdoor: OutdoorProfile::default(),
            start_time: 0.0,
            day_of_year: 180,
            reward: RewardWeights::default(),
            neighbours: 0,
            init_noise: 5.0,
            thermal: ThermalParams::default(),
            thermal_rel_std: 0.0,
            ac: AcParams::default(),
            capacity_choices: Vec::new(),
            lockout_choices: Vec::new(),
            solar: SolarConfig::default(),
            signal: SignalConfig::default(),
            comm_drop_prob: 0.0,
            normalization: ObsNormalization::default(),
            base_table: None,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn with_houses(houses: usize) -> Self {
        Self {
            houses,
            ..Default::default()
        }
    }

    pub fn is_homogeneous(&self) -> bool {
        self.thermal_rel_std == 0.0 && self.capacity_choices.is_empty() && self.lockout_choices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.houses == 0 {
            return Err(Error::config("at least one house is required"));
        }
        if self.neighbours >= self.houses {
            return Err(Error::config(format!(
                "neighbour count {} must be below the house count {}",
                self.neighbours, self.houses
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        if !(self.init_noise >= 0.0) || !self.target.is_finite() {
            return Err(Error::config("invalid target or initial noise"));
        }
        if !(0.0..=1.0).contains(&self.comm_drop_prob) {
            return Err(Error::config("comm_drop_prob must be in [0, 1]"));
        }
        if !(self.thermal_rel_std >= 0.0) {
            return Err(Error::config("thermal_rel_std must be non-negative"));
        }
        self.thermal.validate()?;
        self.ac.validate(self.dt)?;
        for ka in &self.capacity_choices {
            AcParams { ka: *ka, ..self.ac }.validate(self.dt)?;
        }
        for l in &self.lockout_choices {
            AcParams { lockout_max: *l, ..self.ac }.validate(self.dt)?;
        }
        self.signal.perlin.validate()?;
        let n = &self.normalization;
        if !(n.temperature > 0.0 && n.lockout > 0.0 && n.power > 0.0 && n.temperature_offset.is_finite()) {
            return Err(Error::config("normalization constants must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outdoor_extremes() {
        let p = OutdoorProfile::default();
        assert!((p.at(6.0 * 3600.0) - 28.0).abs() < 1e-12);
        assert!((p.at(18.0 * 3600.0) - 34.0).abs() < 1e-12);
        assert!((p.at(0.0) - 31.0).abs() < 1e-12);
        assert!((p.at(30.0 * 3600.0) - 28.0).abs() < 1e-9);
    }

    #[test]
    fn validation() {
        assert!(EnvConfig::default().validate().is_ok());
        assert!(EnvConfig { houses: 0, ..Default::default() }.validate().is_err());
        assert!(EnvConfig { neighbours: 10, ..Default::default() }.validate().is_err());
        assert!(EnvConfig { comm_drop_prob: 1.5, ..Default::default() }.validate().is_err());
        let odd_lockout = EnvConfig {
            ac: AcParams { lockout_max: 42.0, ..Default::default() },
            ..Default::default()
        };
        assert!(odd_lockout.validate().is_err());
    }

    #[test]
    fn toml_roundtrip_with_defaults() {
        let cfg: EnvConfig = toml::from_str("houses = 50\nneighbours = 4\n[ac]\nlockout_max = 0.0\n").unwrap();
        assert_eq!(cfg.houses, 50);
        assert_eq!(cfg.ac.lockout_max, 0.0);
        assert_eq!(cfg.ac.ka, 15_000.0);
        assert_eq!(cfg.target, 20.0);
    }
}
