//! Classical controllers: bang-bang thermostat, greedy myopic knapsack and
//! small-scale model predictive control.

mod mpc;

pub use mpc::{
    enumerate_plans, lockout_inequality_holds, AffineDynamics, MpcAgent, MpcConfig, MpcController,
    MpcProblem, MpcSolution, MpcSolver,
};

use crate::control::Controller;
use crate::env::{Env, Observation};
use crate::error::Result;
use crate::hvac::{AcParams, AcState};
use crate::thermal::HouseState;

/// ON iff the air is strictly warmer than the target.
pub fn bbc_action(obs: &Observation) -> bool {
    obs.th > obs.target
}

#[derive(Debug, Clone, Default)]
pub struct BangBang;

impl Controller for BangBang {
    fn name(&self) -> String {
        "bbc".into()
    }

    fn is_decentralized(&self) -> bool {
        true
    }

    fn act(&mut self, env: &Env) -> Result<Vec<bool>> {
        Ok((0..env.n()).map(|i| bbc_action(&env.observation(i))).collect())
    }
}

/// Greedy knapsack: units ranked by `(Th − TT)/Pa` (descending, ties to the
/// lower index) are switched on until their rated power reaches `signal`.
///
/// With `skip_locked = false` every unit is ranked and counted at its rated
/// power, locked or not; the AC's backup controller ignores ON requests during
/// lockout, as for the bang-bang controller. With `skip_locked = true` units in
/// lockout are left out of the ranking.
pub fn greedy_actions(
    houses: &[HouseState],
    units: &[AcState],
    ac: &[AcParams],
    target: f64,
    signal: f64,
    skip_locked: bool,
) -> Vec<bool> {
    let mut ranked: Vec<(usize, f64)> = (0..houses.len())
        .filter(|&i| !(skip_locked && units[i].is_locked()))
        .map(|i| (i, (houses[i].th - target) / ac[i].power()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut actions = vec![false; houses.len()];
    let mut consumption = 0.0;
    for (i, _) in ranked {
        if consumption >= signal {
            break;
        }
        actions[i] = true;
        consumption += ac[i].power();
    }
    actions
}

#[derive(Debug, Clone, Default)]
pub struct Greedy {
    /// Leave units in lockout out of the ranking.
    pub skip_locked: bool,
}

impl Greedy {
    pub fn skipping_locked() -> Self {
        Self { skip_locked: true }
    }
}

impl Controller for Greedy {
    fn name(&self) -> String {
        if self.skip_locked { "greedy_available" } else { "greedy" }.into()
    }

    fn is_decentralized(&self) -> bool {
        false
    }

    fn act(&mut self, env: &Env) -> Result<Vec<bool>> {
        let s = env.state();
        Ok(greedy_actions(
            &s.houses,
            &s.units,
            env.ac_params(),
            env.config().target,
            s.signal.value,
            self.skip_locked,
        ))
    }
}
