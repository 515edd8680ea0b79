use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{evaluate, ControllerFactory, EvalConfig};
use crate::env::{Env, EnvConfig};
use crate::error::{Error, Result};
use crate::signal::BaseSignalTable;
use crate::thermal::SolarConfig;

/// Cooling capacities drawn by the heterogeneous-capacity disturbance, W.
pub const HETERO_CAPACITIES: [f64; 5] = [10_000.0, 12_500.0, 15_000.0, 17_500.0, 20_000.0];
/// Lockout durations drawn by the heterogeneous-lockout disturbance, s.
pub const HETERO_LOCKOUTS: [f64; 5] = [32.0, 36.0, 40.0, 44.0, 48.0];
/// Relative std of the truncated-Gaussian thermal parameter noise.
pub const HETERO_THERMAL_STD: f64 = 0.5;

/// Daytime solar gain used by the "solar on" shift: a parabola in the hour of
/// day peaking at 1 kW at 12:30 and reaching 0 at the window edges.
pub fn solar_preset() -> SolarConfig {
    // 1000 · (1 − ((h − 12.5)/5)²) = −5250 + 1000 h − 40 h²
    SolarConfig {
        coefficients: vec![-5250.0, 1000.0, 0.0, -40.0],
    }
}

/// One perturbation of the nominal environment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Disturbance {
    Nominal,
    /// Per-message loss probability.
    CommDrop(f64),
    ThermalHetero,
    CapacityHetero,
    LockoutHetero,
    /// Constant shift of the outdoor profile, °C.
    OutdoorShift(f64),
    /// Multiplier on the base demand.
    SignalMean(f64),
    /// Multiplier on the noise amplitude.
    NoiseAmplitude(f64),
    /// Multiplier on the noise frequency.
    NoiseFrequency(f64),
    Solar,
}

impl Disturbance {
    pub fn label(&self) -> String {
        match self {
            Self::Nominal => "nominal".into(),
            Self::CommDrop(p) => format!("p_d={p}"),
            Self::ThermalHetero => "hetero_thermal".into(),
            Self::CapacityHetero => "hetero_capacity".into(),
            Self::LockoutHetero => "hetero_lockout".into(),
            Self::OutdoorShift(d) => format!("outdoor{d:+}C"),
            Self::SignalMean(s) => format!("signal_mean_x{s}"),
            Self::NoiseAmplitude(s) => format!("noise_amplitude_x{s}"),
            Self::NoiseFrequency(s) => format!("noise_frequency_x{s}"),
            Self::Solar => "solar".into(),
        }
    }

    pub fn apply(&self, base: &EnvConfig) -> Result<EnvConfig> {
        let mut c = base.clone();
        match *self {
            Self::Nominal => {}
            Self::CommDrop(p) => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config(format!("drop probability {p} outside [0, 1]")));
                }
                c.comm_drop_prob = p;
            }
            Self::ThermalHetero => c.thermal_rel_std = HETERO_THERMAL_STD,
            Self::CapacityHetero => c.capacity_choices = HETERO_CAPACITIES.to_vec(),
            Self::LockoutHetero => c.lockout_choices = HETERO_LOCKOUTS.to_vec(),
            Self::OutdoorShift(d) => c.outdoor.offset += d,
            Self::SignalMean(s) => c.signal.base_scale *= positive(s)?,
            Self::NoiseAmplitude(s) => c.signal.amplitude *= positive(s)?,
            Self::NoiseFrequency(s) => c.signal.perlin.base_period /= positive(s)?,
            Self::Solar => c.solar = solar_preset(),
        }
        c.validate()?;
        Ok(c)
    }
}

fn positive(s: f64) -> Result<f64> {
    if s > 0.0 && s.is_finite() {
        Ok(s)
    } else {
        Err(Error::config(format!("scale factor {s} must be positive")))
    }
}

/// Which disturbances a robustness run covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessSpec {
    pub drop_probs: Vec<f64>,
    pub thermal: bool,
    pub capacity: bool,
    pub lockout: bool,
    /// Outdoor temperature shifts, °C.
    pub outdoor_shifts: Vec<f64>,
    /// Base-demand multipliers.
    pub signal_means: Vec<f64>,
    pub noise_amplitude: Option<f64>,
    pub noise_frequency: Option<f64>,
    pub solar: bool,
}

impl Default for RobustnessSpec {
    fn default() -> Self {
        Self {
            drop_probs: vec![0.1, 0.5],
            thermal: true,
            capacity: true,
            lockout: true,
            outdoor_shifts: vec![-4.0, 4.0],
            signal_means: vec![0.7, 1.3],
            noise_amplitude: Some(1.3),
            noise_frequency: Some(2.0),
            solar: true,
        }
    }
}

impl RobustnessSpec {
    /// Communication faults only.
    pub fn comm_only(drop_probs: Vec<f64>) -> Self {
        Self {
            drop_probs,
            thermal: false,
            capacity: false,
            lockout: false,
            outdoor_shifts: Vec::new(),
            signal_means: Vec::new(),
            noise_amplitude: None,
            noise_frequency: None,
            solar: false,
        }
    }

    /// Nominal first, then every enabled disturbance.
    pub fn disturbances(&self) -> Vec<Disturbance> {
        let mut d = vec![Disturbance::Nominal];
        d.extend(self.drop_probs.iter().map(|&p| Disturbance::CommDrop(p)));
        if self.thermal {
            d.push(Disturbance::ThermalHetero);
        }
        if self.capacity {
            d.push(Disturbance::CapacityHetero);
        }
        if self.lockout {
            d.push(Disturbance::LockoutHetero);
        }
        d.extend(self.outdoor_shifts.iter().map(|&x| Disturbance::OutdoorShift(x)));
        d.extend(self.signal_means.iter().map(|&x| Disturbance::SignalMean(x)));
        d.extend(self.noise_amplitude.map(Disturbance::NoiseAmplitude));
        d.extend(self.noise_frequency.map(Disturbance::NoiseFrequency));
        if self.solar {
            d.push(Disturbance::Solar);
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let base = EnvConfig::default();
        for d in self.disturbances() {
            d.apply(&base)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub controller: String,
    pub disturbance: String,
    pub signal_rmse: f64,
    pub signal_rmse_std: f64,
    pub temperature_rmse: f64,
    pub max_temperature_rmse: f64,
    /// Signal RMSE relative to the nominal row.
    pub signal_ratio: f64,
}

/// Evaluate one controller under every disturbance of `spec`.
pub fn robustness_suite(
    factory: &ControllerFactory<'_>,
    base: &EnvConfig,
    table: Option<Arc<BaseSignalTable>>,
    spec: &RobustnessSpec,
    seeds: &[u64],
    eval: &EvalConfig,
) -> Result<Vec<RobustnessRow>> {
    spec.validate()?;
    let table = match table {
        Some(t) => t,
        None => Env::new(base.clone())?.table().clone(),
    };
    let mut rows: Vec<RobustnessRow> = Vec::new();
    for d in spec.disturbances() {
        let cfg = d.apply(base)?;
        let r = evaluate(factory, &cfg, Some(table.clone()), seeds, eval)?;
        let nominal = rows.first().map_or(r.mean.signal_rmse, |n| n.signal_rmse);
        rows.push(RobustnessRow {
            controller: r.controller,
            disturbance: d.label(),
            signal_rmse: r.mean.signal_rmse,
            signal_rmse_std: r.std.signal_rmse,
            temperature_rmse: r.mean.temperature_rmse,
            max_temperature_rmse: r.mean.max_temperature_rmse,
            signal_ratio: if nominal > 0.0 { r.mean.signal_rmse / nominal } else { f64::NAN },
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermal::{solar_gain, SOLAR_WINDOW_HOURS};

    #[test]
    fn heterogeneous_lockouts_come_from_the_list() {
        let cfg = Disturbance::LockoutHetero.apply(&EnvConfig::with_houses(200)).unwrap();
        let env = Env::new(cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for ac in env.ac_params() {
            assert!(HETERO_LOCKOUTS.contains(&ac.lockout_max), "{}", ac.lockout_max);
            seen.insert(ac.lockout_max as i64);
        }
        assert_eq!(seen.len(), HETERO_LOCKOUTS.len());
    }

    #[test]
    fn heterogeneous_capacities_come_from_the_list() {
        let cfg = Disturbance::CapacityHetero.apply(&EnvConfig::with_houses(100)).unwrap();
        for ac in Env::new(cfg).unwrap().ac_params() {
            assert!(HETERO_CAPACITIES.contains(&ac.ka));
        }
    }

    #[test]
    fn thermal_samples_stay_positive() {
        let cfg = Disturbance::ThermalHetero.apply(&EnvConfig::with_houses(300)).unwrap();
        let env = Env::new(cfg).unwrap();
        let p = env.thermal_params();
        assert!(p.iter().all(|t| t.uh > 0.0 && t.cm > 0.0 && t.ch > 0.0 && t.hm > 0.0));
        // Heterogeneous: not all equal.
        assert!(p.iter().any(|t| t.uh != p[0].uh));
    }

    #[test]
    fn shifts_touch_the_right_fields() {
        let base = EnvConfig::default();
        assert_eq!(Disturbance::OutdoorShift(4.0).apply(&base).unwrap().outdoor.offset, 4.0);
        assert!((Disturbance::SignalMean(0.7).apply(&base).unwrap().signal.base_scale - 0.7).abs() < 1e-12);
        let a = Disturbance::NoiseAmplitude(1.3).apply(&base).unwrap();
        assert!((a.signal.amplitude - base.signal.amplitude * 1.3).abs() < 1e-12);
        let f = Disturbance::NoiseFrequency(2.0).apply(&base).unwrap();
        assert_eq!(f.signal.perlin.base_period, base.signal.perlin.base_period / 2.0);
        assert!(Disturbance::CommDrop(1.5).apply(&base).is_err());
        assert!(Disturbance::SignalMean(-1.0).apply(&base).is_err());
    }

    #[test]
    fn solar_preset_shape() {
        let s = solar_preset();
        let at = |h: f64| solar_gain(180, h * 3600.0, &s);
        assert!((at(12.5) - 1000.0).abs() < 1e-9);
        assert!(at(SOLAR_WINDOW_HOURS.0).abs() < 1e-9);
        assert!(at(SOLAR_WINDOW_HOURS.1).abs() < 1e-9);
        assert_eq!(at(3.0), 0.0);
        assert!(at(10.0) > 0.0);
    }

    #[test]
    fn default_spec_lists_every_cell() {
        let d = RobustnessSpec::default().disturbances();
        assert_eq!(d[0], Disturbance::Nominal);
        assert_eq!(d.len(), 1 + 2 + 3 + 2 + 2 + 1 + 1 + 1);
        assert_eq!(RobustnessSpec::comm_only(vec![0.5]).disturbances().len(), 2);
    }
}
