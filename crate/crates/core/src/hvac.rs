//! Air-conditioner power/heat model and the compressor lockout state machine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcParams {
    /// Cooling capacity, W.
    pub ka: f64,
    /// Coefficient of performance.
    pub cop: f64,
    /// Latent cooling fraction.
    pub latent: f64,
    /// Lockout duration, s.
    pub lockout_max: f64,
}

impl Default for AcParams {
    fn default() -> Self {
        Self {
            ka: 15_000.0,
            cop: 2.5,
            latent: 0.35,
            lockout_max: 40.0,
        }
    }
}

impl AcParams {
    pub fn validate(&self, dt: f64) -> Result<()> {
        if !(self.ka > 0.0) || !(self.cop > 0.0) || !(self.latent >= 0.0) || !(self.lockout_max >= 0.0)
        {
            return Err(Error::config(format!("invalid AC parameters {self:?}")));
        }
        let steps = self.lockout_max / dt;
        if (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::config(format!(
                "lockout {} s is not a multiple of the {} s timestep",
                self.lockout_max, dt
            )));
        }
        Ok(())
    }

    /// Electrical power drawn when on, W.
    pub fn power(&self) -> f64 {
        self.ka / self.cop
    }

    /// Heat flow into the air when on, W (negative).
    pub fn heat(&self) -> f64 {
        -self.ka / (1.0 + self.latent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AcState {
    pub on: bool,
    /// Remaining lockout, s.
    pub lockout_remaining: f64,
}

impl AcState {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn is_locked(&self) -> bool {
        self.lockout_remaining > 0.0
    }
}

/// `(Qa, Pa)`: heat flow into the air and electrical power, both in W.
pub fn ac_outputs(params: &AcParams, state: &AcState) -> (f64, f64) {
    if state.on {
        (params.heat(), params.power())
    } else {
        (0.0, 0.0)
    }
}

/// Apply the requested on/off action through the backup controller.
///
/// An ON→OFF transition arms the lockout at `lockout_max` and the clock is
/// decremented by `dt` within the same step, so a unit switched off at step `t`
/// may come back on at step `t + lockout_max/dt`. ON requests while locked out
/// are ignored.
pub fn apply_action(state: &AcState, params: &AcParams, action: bool, dt: f64) -> AcState {
    let mut next = *state;
    if action {
        if !next.is_locked() {
            next.on = true;
        }
    } else if next.on {
        next.on = false;
        next.lockout_remaining = params.lockout_max;
    }
    next.lockout_remaining = (next.lockout_remaining - dt).max(0.0);
    // Floating drift guard for non-representable dt.
    if next.lockout_remaining < 1e-9 {
        next.lockout_remaining = 0.0;
    }
    next
}
