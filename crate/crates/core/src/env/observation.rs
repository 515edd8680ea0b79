use serde::{Deserialize, Serialize};

use super::ObsNormalization;

/// Fields per local observation.
pub const OBS_LEN: usize = 7;
/// Fields per hand-engineered message.
pub const HE_MESSAGE_LEN: usize = 3;

/// Local view of one agent. Feature order:
/// `[Th, Tm, TT, on, lockout, s/N, P/N]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub th: f64,
    pub tm: f64,
    pub target: f64,
    pub on: bool,
    pub lockout_remaining: f64,
    pub signal_per_agent: f64,
    pub consumption_per_agent: f64,
}

impl Observation {
    pub fn features(&self, norm: &ObsNormalization) -> [f64; OBS_LEN] {
        [
            (self.th - norm.temperature_offset) / norm.temperature,
            (self.tm - norm.temperature_offset) / norm.temperature,
            (self.target - norm.temperature_offset) / norm.temperature,
            f64::from(u8::from(self.on)),
            self.lockout_remaining / norm.lockout,
            self.signal_per_agent / norm.power,
            self.consumption_per_agent / norm.power,
        ]
    }
}

/// Hand-engineered message. Feature order: `[Th − TT, lockout, on]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeMessage {
    pub temp_diff: f64,
    pub lockout_remaining: f64,
    pub on: bool,
}

impl HeMessage {
    pub fn features(&self, norm: &ObsNormalization) -> [f64; HE_MESSAGE_LEN] {
        [
            self.temp_diff / norm.temperature,
            self.lockout_remaining / norm.lockout,
            f64::from(u8::from(self.on)),
        ]
    }
}
