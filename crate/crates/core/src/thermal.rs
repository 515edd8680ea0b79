//! Second-order (air + mass) thermal model of a single-zone house.
//!
//! The house is two coupled capacitances: the indoor air `Ch`, exchanging heat
//! with the outdoors through `Uh` and with the building mass `Cm` through `Hm`.
//! Over a step with constant inputs the linear system has an exact closed-form
//! flow, evaluated here through the roots `r1`, `r2` of its characteristic
//! quadratic.
//!
//! All temperatures are in °C. The model is affine in temperature, so shifting
//! every temperature by a constant (e.g. to Kelvin) shifts the result by the
//! same constant and no unit conversion is ever needed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature bounds applied by the simulator after each step.
pub const TEMP_CLAMP: (f64, f64) = (-50.0, 80.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalParams {
    /// Wall conductance, W/K.
    pub uh: f64,
    /// Mass thermal capacity, J/K.
    pub cm: f64,
    /// Air thermal capacity, J/K.
    pub ch: f64,
    /// Mass surface conductance, W/K.
    pub hm: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            uh: 2.18e2,
            cm: 3.45e6,
            ch: 9.08e5,
            hm: 2.84e3,
        }
    }
}

impl ThermalParams {
    pub fn new(uh: f64, cm: f64, ch: f64, hm: f64) -> Result<Self> {
        let p = Self { uh, cm, ch, hm };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.uh, self.cm, self.ch, self.hm];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::config(format!(
                "thermal parameters must be finite and strictly positive, got {self:?}"
            )));
        }
        let (a, b, c) = self.quadratic();
        let disc = b * b - 4.0 * a * c;
        if !(disc > 0.0) {
            return Err(Error::NonFiniteResult(format!(
                "characteristic discriminant {disc} is not strictly positive (repeated root)"
            )));
        }
        Ok(())
    }

    /// Coefficients `(a, b, c)` of `a r² + b r + c = 0`.
    fn quadratic(&self) -> (f64, f64, f64) {
        let a = self.cm * self.ch / self.hm;
        let b = self.cm * (self.uh + self.hm) / self.hm + self.ch;
        let c = self.uh;
        (a, b, c)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.uh, self.cm, self.ch, self.hm]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HouseState {
    /// Indoor air temperature, °C.
    pub th: f64,
    /// Indoor mass temperature, °C.
    pub tm: f64,
}

impl HouseState {
    pub fn new(th: f64, tm: f64) -> Self {
        Self { th, tm }
    }

    /// Clamp into [`TEMP_CLAMP`]; returns `true` when clamping was needed.
    pub fn clamp(&mut self) -> bool {
        let (lo, hi) = TEMP_CLAMP;
        let diverged = self.th < lo || self.th > hi || self.tm < lo || self.tm > hi;
        self.th = self.th.clamp(lo, hi);
        self.tm = self.tm.clamp(lo, hi);
        diverged
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThermalInputs {
    /// Outdoor temperature, °C.
    pub to: f64,
    /// AC heat flow, W (negative when cooling).
    pub qa: f64,
    /// Solar gain, W.
    pub qs: f64,
    /// Timestep, s.
    pub dt: f64,
}

/// Everything in the closed form that depends only on `(params, dt)`.
///
/// Homogeneous aggregations build this once and reuse it for every house;
/// [`step_thermal`] goes through the same code, so both paths are bit-identical.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThermalCoefficients {
    params: ThermalParams,
    dt: f64,
    r1: f64,
    r2: f64,
    e1: f64,
    e2: f64,
    a3: f64,
    a4: f64,
}

impl ThermalCoefficients {
    pub fn new(params: &ThermalParams, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::config(format!("timestep must be positive, got {dt}")));
        }
        let (a, b, c) = params.quadratic();
        let disc = b * b - 4.0 * a * c;
        if !(disc > 0.0) {
            return Err(Error::NonFiniteResult(format!(
                "characteristic discriminant {disc} is not strictly positive"
            )));
        }
        let sq = disc.sqrt();
        let r1 = (-b + sq) / (2.0 * a);
        let r2 = (-b - sq) / (2.0 * a);
        let coeffs = Self {
            params: *params,
            dt,
            r1,
            r2,
            e1: (r1 * dt).exp(),
            e2: (r2 * dt).exp(),
            a3: (r1 * params.ch + params.uh + params.hm) / params.hm,
            a4: (r2 * params.ch + params.uh + params.hm) / params.hm,
        };
        let all = [coeffs.r1, coeffs.r2, coeffs.e1, coeffs.e2, coeffs.a3, coeffs.a4];
        if all.iter().any(|v| !v.is_finite()) || r1 == r2 {
            return Err(Error::NonFiniteResult(format!(
                "degenerate thermal coefficients for {params:?}"
            )));
        }
        Ok(coeffs)
    }

    pub fn params(&self) -> &ThermalParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Characteristic roots `(r1, r2)`, 1/s.
    pub fn roots(&self) -> (f64, f64) {
        (self.r1, self.r2)
    }

    /// Advance one step with outdoor temperature `to` and net heat `qa + qs`.
    pub fn step(&self, state: HouseState, to: f64, qa: f64, qs: f64) -> Result<HouseState> {
        let p = &self.params;
        let c = p.uh;
        let d = qa + qs + p.uh * to;
        let d_over_c = d / c;
        let dth0 = (p.hm * state.tm - (p.uh + p.hm) * state.th + d) / p.ch;
        let a1 = (self.r2 * state.th - dth0 - self.r2 * d_over_c) / (self.r2 - self.r1);
        let a2 = state.th - d_over_c - a1;
        let th = a1 * self.e1 + a2 * self.e2 + d_over_c;
        let tm = a1 * self.a3 * self.e1 + a2 * self.a4 * self.e2 + d_over_c;
        if !th.is_finite() || !tm.is_finite() {
            return Err(Error::NonFiniteResult(format!(
                "thermal step produced ({th}, {tm}) from {state:?}"
            )));
        }
        Ok(HouseState { th, tm })
    }
}

/// One closed-form thermal step under zero-order-hold inputs.
pub fn step_thermal(
    state: HouseState,
    params: &ThermalParams,
    inputs: &ThermalInputs,
) -> Result<HouseState> {
    ThermalCoefficients::new(params, inputs.dt)?.step(state, inputs.to, inputs.qa, inputs.qs)
}

/// Perturb every parameter with zero-mean Gaussian noise of standard deviation
/// `rel_std × value`, redrawing any non-positive sample.
pub fn sample_thermal_params<R: Rng + ?Sized>(base: &ThermalParams, rel_std: f64, rng: &mut R) -> ThermalParams {
    let mut draw = |v: f64| -> f64 {
        if rel_std <= 0.0 {
            return v;
        }
        let normal = Normal::new(v, rel_std * v).expect("finite std");
        loop {
            let x = normal.sample(rng);
            if x > 0.0 {
                return x;
            }
        }
    };
    ThermalParams {
        uh: draw(base.uh),
        cm: draw(base.cm),
        ch: draw(base.ch),
        hm: draw(base.hm),
    }
}

/// Hours of the day during which solar gain is considered non-negligible.
pub const SOLAR_WINDOW_HOURS: (f64, f64) = (7.5, 17.5);

/// Pluggable solar-gain model: a bivariate polynomial of total degree ≤ 4 in
/// (hour of day, day of year). No coefficients means solar gain is disabled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolarConfig {
    /// Coefficients in graded order: `1, h, d, h², h·d, d², h³, h²d, h·d², d³, h⁴, …`
    /// (up to 15 entries; missing trailing entries are zero).
    #[serde(default)]
    pub coefficients: Vec<f64>,
}

impl SolarConfig {
    pub fn constant(watts: f64) -> Self {
        Self {
            coefficients: vec![watts],
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.coefficients.iter().any(|c| *c != 0.0)
    }
}

/// Solar heat gain in W at the given calendar time.
pub fn solar_gain(day_of_year: u32, seconds_of_day: f64, config: &SolarConfig) -> f64 {
    if !config.is_enabled() {
        return 0.0;
    }
    let hour = seconds_of_day.rem_euclid(86_400.0) / 3600.0;
    if hour < SOLAR_WINDOW_HOURS.0 || hour > SOLAR_WINDOW_HOURS.1 {
        return 0.0;
    }
    let day = f64::from(day_of_year);
    let mut value = 0.0;
    let mut k = 0;
    'outer: for degree in 0..=4 {
        for pow_day in 0..=degree {
            let Some(coef) = config.coefficients.get(k) else {
                break 'outer;
            };
            let pow_hour = degree - pow_day;
            value += coef * hour.powi(pow_hour) * day.powi(pow_day);
            k += 1;
        }
    }
    value.max(0.0)
}
