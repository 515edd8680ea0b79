//! Receding-horizon MPC over binary on/off plans.
//!
//! Each re-plan minimizes, over an `N × H` binary plan and a constant future
//! signal `s0`,
//!
//! ```text
//! Σ_t α_sig (Σ_i P_i a_it − s0)² + α_temp Σ_i (Th_it − TT)²
//! ```
//!
//! subject to the closed-form thermal dynamics and the compressor lockout.
//! Two solvers are provided: exhaustive enumeration for tiny instances, which
//! simulates the dynamics step by step, and branch-and-bound over the
//! equivalent dense quadratic form with box relaxations solved exactly by a
//! primal active-set method.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::control::Controller;
use crate::env::{Env, RewardWeights};
use crate::error::{Error, Result};
use crate::hvac::AcState;
use crate::thermal::{solar_gain, HouseState, ThermalCoefficients, ThermalParams};

/// Largest `N·H` accepted by exhaustive enumeration.
pub const MAX_ENUMERATION_VARS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpcSolver {
    Enumerate,
    BranchAndBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    /// Planning horizon, steps.
    pub horizon: usize,
    /// Control interval, s.
    pub dt: f64,
    pub solver: MpcSolver,
    /// Relative optimality gap at which branch-and-bound may stop.
    pub gap: f64,
    /// Wall-clock budget per re-plan, s (non-positive disables it).
    pub time_budget: f64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            dt: 12.0,
            solver: MpcSolver::BranchAndBound,
            gap: 0.0,
            time_budget: 10.0,
        }
    }
}

/// Exact affine form `x' = M x + g·Qa + h` of one closed-form step at fixed
/// outdoor temperature, solar gain and timestep, with `x = (Th, Tm)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineDynamics {
    pub m: [[f64; 2]; 2],
    /// Response to one watt of AC heat.
    pub g: [f64; 2],
    pub h: [f64; 2],
}

impl AffineDynamics {
    /// Extract the matrices by evaluating the closed form at basis points.
    pub fn from_closed_form(coeffs: &ThermalCoefficients, outdoor: f64, solar: f64) -> Result<Self> {
        const HEAT_PROBE: f64 = 1000.0;
        let eval = |th: f64, tm: f64, qa: f64| coeffs.step(HouseState::new(th, tm), outdoor, qa, solar);
        let origin = eval(0.0, 0.0, 0.0)?;
        let e_th = eval(1.0, 0.0, 0.0)?;
        let e_tm = eval(0.0, 1.0, 0.0)?;
        let e_q = eval(0.0, 0.0, HEAT_PROBE)?;
        Ok(Self {
            m: [
                [e_th.th - origin.th, e_tm.th - origin.th],
                [e_th.tm - origin.tm, e_tm.tm - origin.tm],
            ],
            g: [(e_q.th - origin.th) / HEAT_PROBE, (e_q.tm - origin.tm) / HEAT_PROBE],
            h: [origin.th, origin.tm],
        })
    }

    pub fn apply(&self, x: HouseState, qa: f64) -> HouseState {
        HouseState {
            th: self.m[0][0] * x.th + self.m[0][1] * x.tm + self.g[0] * qa + self.h[0],
            tm: self.m[1][0] * x.th + self.m[1][1] * x.tm + self.g[1] * qa + self.h[1],
        }
    }
}

/// One house as seen by the planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcAgent {
    pub state: HouseState,
    pub params: ThermalParams,
    /// Electrical power when on, W.
    pub power: f64,
    /// Heat flow when on, W.
    pub heat: f64,
    pub was_on: bool,
    /// Leading plan steps during which the unit must stay off (current lockout).
    pub blocked_steps: usize,
    /// Off steps required after every ON→OFF transition.
    pub lockout_steps: usize,
}

impl MpcAgent {
    pub fn from_unit(
        state: HouseState,
        params: ThermalParams,
        power: f64,
        heat: f64,
        unit: &AcState,
        lockout_max: f64,
        dt: f64,
    ) -> Self {
        let to_steps = |secs: f64| (secs / dt - 1e-9).ceil().max(0.0) as usize;
        Self {
            state,
            params,
            power,
            heat,
            was_on: unit.on,
            blocked_steps: to_steps(unit.lockout_remaining),
            lockout_steps: to_steps(lockout_max),
        }
    }

    /// Whether a single-agent plan respects the lockout.
    pub fn row_feasible(&self, row: &[bool]) -> bool {
        let mut prev = self.was_on;
        let mut free_from = self.blocked_steps;
        for (t, &on) in row.iter().enumerate() {
            if on {
                if t < free_from {
                    return false;
                }
            } else if prev {
                free_from = t + self.lockout_steps;
            }
            prev = on;
        }
        true
    }

    /// Status history before the plan (most recent last) consistent with the
    /// current state, `lockout_steps + 1` entries long.
    pub fn history(&self) -> Vec<bool> {
        let len = self.lockout_steps + 1;
        if self.was_on {
            vec![true; len]
        } else if self.blocked_steps > 0 {
            let off = self.lockout_steps.saturating_sub(self.blocked_steps);
            let mut h = vec![true; len - off];
            h.extend(std::iter::repeat_n(false, off));
            h
        } else {
            vec![false; len]
        }
    }
}

/// Literal lockout inequality
/// `L (a_t − ω_{t−1}) − Σ_{k=0}^{L} (1 − ω_{t−k}) ≤ 0` for every plan step.
pub fn lockout_inequality_holds(row: &[bool], history: &[bool], lockout_steps: usize) -> bool {
    let status = |idx: i64| -> bool {
        if idx >= 0 {
            row[idx as usize]
        } else {
            let back = (-idx) as usize;
            if back <= history.len() {
                history[history.len() - back]
            } else {
                false
            }
        }
    };
    let l = lockout_steps as i64;
    (0..row.len() as i64).all(|t| {
        let a = i64::from(row[t as usize]);
        let prev = i64::from(status(t - 1));
        let off: i64 = (0..=l).map(|k| 1 - i64::from(status(t - k))).sum();
        l * (a - prev) - off <= 0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcProblem {
    pub agents: Vec<MpcAgent>,
    pub horizon: usize,
    /// Assumed-constant future signal, W.
    pub signal: f64,
    pub target: f64,
    pub weights: RewardWeights,
    pub outdoor: f64,
    pub solar: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    /// `plan[i][t]`: whether house `i` is on at plan step `t`.
    pub plan: Vec<Vec<bool>>,
    pub objective: f64,
    pub timed_out: bool,
    pub nodes: usize,
}

impl MpcSolution {
    pub fn first_actions(&self) -> Vec<bool> {
        self.plan.iter().map(|row| row.first().copied().unwrap_or(false)).collect()
    }
}

impl MpcProblem {
    pub fn from_env(env: &Env, cfg: &MpcConfig) -> Result<Self> {
        let s = env.state();
        let agents = (0..env.n())
            .map(|i| {
                let ac = &env.ac_params()[i];
                MpcAgent::from_unit(
                    s.houses[i],
                    env.thermal_params()[i],
                    ac.power(),
                    ac.heat(),
                    &s.units[i],
                    ac.lockout_max,
                    cfg.dt,
                )
            })
            .collect();
        Ok(Self {
            agents,
            horizon: cfg.horizon,
            signal: s.signal.value,
            target: env.config().target,
            weights: env.config().reward,
            outdoor: env.outdoor_temperature(),
            solar: solar_gain(env.config().day_of_year, s.time, &env.config().solar),
            dt: cfg.dt,
        })
    }

    pub fn vars(&self) -> usize {
        self.agents.len() * self.horizon
    }

    pub fn plan_feasible(&self, plan: &[Vec<bool>]) -> bool {
        plan.len() == self.agents.len()
            && plan
                .iter()
                .zip(&self.agents)
                .all(|(row, a)| row.len() == self.horizon && a.row_feasible(row))
    }

    /// Temperature cost of one agent's row by stepping the closed form directly.
    fn simulated_temperature_cost(&self, agent: &MpcAgent, coeffs: &ThermalCoefficients, row: &[bool]) -> Result<f64> {
        let mut x = agent.state;
        let mut cost = 0.0;
        for &on in row {
            x = coeffs.step(x, self.outdoor, if on { agent.heat } else { 0.0 }, self.solar)?;
            let e = x.th - self.target;
            cost += e * e;
        }
        Ok(self.weights.temperature * cost)
    }

    fn signal_cost(&self, power_per_step: &[f64]) -> f64 {
        power_per_step
            .iter()
            .map(|p| {
                let e = p - self.signal;
                self.weights.signal * e * e
            })
            .sum()
    }

    /// Objective of a plan, simulating the closed form step by step.
    pub fn simulated_objective(&self, plan: &[Vec<bool>]) -> Result<f64> {
        let mut power = vec![0.0; self.horizon];
        let mut cost = 0.0;
        for (agent, row) in self.agents.iter().zip(plan) {
            let coeffs = ThermalCoefficients::new(&agent.params, self.dt)?;
            cost += self.simulated_temperature_cost(agent, &coeffs, row)?;
            for (t, &on) in row.iter().enumerate() {
                if on {
                    power[t] += agent.power;
                }
            }
        }
        Ok(cost + self.signal_cost(&power))
    }

    pub fn solve(&self, cfg: &MpcConfig) -> Result<MpcSolution> {
        match cfg.solver {
            MpcSolver::Enumerate => enumerate_plans(self),
            MpcSolver::BranchAndBound => {
                let budget = (cfg.time_budget > 0.0).then(|| Duration::from_secs_f64(cfg.time_budget));
                BranchAndBound::new(self)?.run(cfg.gap, budget)
            }
        }
    }
}

/// Exhaustive search over every lockout-feasible plan.
pub fn enumerate_plans(problem: &MpcProblem) -> Result<MpcSolution> {
    let h = problem.horizon;
    if problem.vars() > MAX_ENUMERATION_VARS {
        return Err(Error::config(format!(
            "enumeration is limited to N·H ≤ {MAX_ENUMERATION_VARS}, got {}",
            problem.vars()
        )));
    }
    // Per agent: feasible rows with their (separable) temperature cost.
    let mut rows: Vec<Vec<(Vec<bool>, f64)>> = Vec::with_capacity(problem.agents.len());
    for agent in &problem.agents {
        let coeffs = ThermalCoefficients::new(&agent.params, problem.dt)?;
        let mut options = Vec::new();
        for mask in 0u32..(1u32 << h) {
            let row: Vec<bool> = (0..h).map(|t| mask & (1 << t) != 0).collect();
            if agent.row_feasible(&row) {
                let cost = problem.simulated_temperature_cost(agent, &coeffs, &row)?;
                options.push((row, cost));
            }
        }
        rows.push(options);
    }

    struct Search<'a> {
        problem: &'a MpcProblem,
        rows: &'a [Vec<(Vec<bool>, f64)>],
        choice: Vec<usize>,
        power: Vec<f64>,
        best: f64,
        best_choice: Vec<usize>,
        nodes: usize,
    }

    impl Search<'_> {
        fn visit(&mut self, agent: usize, temp_cost: f64) {
            if agent == self.rows.len() {
                self.nodes += 1;
                let total = temp_cost + self.problem.signal_cost(&self.power);
                if total < self.best {
                    self.best = total;
                    self.best_choice = self.choice.clone();
                }
                return;
            }
            let p = self.problem.agents[agent].power;
            for k in 0..self.rows[agent].len() {
                let (row, cost) = &self.rows[agent][k];
                for (t, &on) in row.iter().enumerate() {
                    if on {
                        self.power[t] += p;
                    }
                }
                self.choice[agent] = k;
                self.visit(agent + 1, temp_cost + cost);
                for (t, &on) in row.iter().enumerate() {
                    if on {
                        self.power[t] -= p;
                    }
                }
            }
        }
    }

    let n = problem.agents.len();
    let mut search = Search {
        problem,
        rows: &rows,
        choice: vec![0; n],
        power: vec![0.0; h],
        best: f64::INFINITY,
        best_choice: vec![0; n],
        nodes: 0,
    };
    search.visit(0, 0.0);
    let plan = search
        .best_choice
        .iter()
        .enumerate()
        .map(|(i, &k)| rows[i][k].0.clone())
        .collect();
    Ok(MpcSolution {
        plan,
        objective: search.best,
        timed_out: false,
        nodes: search.nodes,
    })
}

/// Dense quadratic form `f(x) = xᵀQx + cᵀx + k` of the MPC objective.
#[derive(Debug, Clone)]
struct QuadraticForm {
    n: usize,
    q: Vec<f64>,
    c: Vec<f64>,
    k: f64,
}

impl QuadraticForm {
    fn build(problem: &MpcProblem) -> Result<Self> {
        let h = problem.horizon;
        let n = problem.vars();
        let a_sig = problem.weights.signal;
        let a_temp = problem.weights.temperature;
        let mut q = vec![0.0; n * n];
        let mut c = vec![0.0; n];
        let mut k = a_sig * h as f64 * problem.signal * problem.signal;

        for (i, ai) in problem.agents.iter().enumerate() {
            for (j, aj) in problem.agents.iter().enumerate() {
                for t in 0..h {
                    q[(i * h + t) * n + j * h + t] += a_sig * ai.power * aj.power;
                }
            }
            for t in 0..h {
                c[i * h + t] -= 2.0 * a_sig * problem.signal * ai.power;
            }
        }

        for (i, agent) in problem.agents.iter().enumerate() {
            let coeffs = ThermalCoefficients::new(&agent.params, problem.dt)?;
            let dynamics = AffineDynamics::from_closed_form(&coeffs, problem.outdoor, problem.solar)?;
            // Free response (all off) and impulse response of one on-step.
            let mut offset = Vec::with_capacity(h);
            let mut x = agent.state;
            for _ in 0..h {
                x = dynamics.apply(x, 0.0);
                offset.push(x.th - problem.target);
            }
            let mut impulse = Vec::with_capacity(h);
            let mut v = [dynamics.g[0] * agent.heat, dynamics.g[1] * agent.heat];
            for _ in 0..h {
                impulse.push(v[0]);
                v = [
                    dynamics.m[0][0] * v[0] + dynamics.m[0][1] * v[1],
                    dynamics.m[1][0] * v[0] + dynamics.m[1][1] * v[1],
                ];
            }
            // e_t = offset_t + Σ_{τ≤t} impulse[t−τ] x_τ
            for t in 0..h {
                k += a_temp * offset[t] * offset[t];
                for tau in 0..=t {
                    let g1 = impulse[t - tau];
                    c[i * h + tau] += 2.0 * a_temp * offset[t] * g1;
                    for tau2 in 0..=t {
                        let g2 = impulse[t - tau2];
                        q[(i * h + tau) * n + i * h + tau2] += a_temp * g1 * g2;
                    }
                }
            }
        }
        Ok(Self { n, q, c, k })
    }

    fn value(&self, x: &[f64]) -> f64 {
        let mut v = self.k;
        for r in 0..self.n {
            let row = &self.q[r * self.n..(r + 1) * self.n];
            let qx: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            v += x[r] * qx + self.c[r] * x[r];
        }
        v
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let row = &self.q[r * self.n..(r + 1) * self.n];
                2.0 * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.c[r]
            })
            .collect()
    }

    /// Exact minimizer over the box `[lo, hi]` (primal active-set method).
    fn minimize_box(&self, lo: &[f64], hi: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Work with ½xᵀAx + bᵀx, A = 2Q.
        let mut x: Vec<f64> = lo.to_vec();
        let mut bound: Vec<bool> = vec![true; n];
        let scale = 1.0 + self.c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-11 * scale;
        for _ in 0..(20 * n + 100) {
            let free: Vec<usize> = (0..n).filter(|&j| !bound[j]).collect();
            let y = if free.is_empty() {
                Vec::new()
            } else {
                let m = free.len();
                let mut a = vec![0.0; m * m];
                let mut rhs = vec![0.0; m];
                for (r, &jr) in free.iter().enumerate() {
                    for (s, &js) in free.iter().enumerate() {
                        a[r * m + s] = 2.0 * self.q[jr * n + js];
                    }
                    let mut b = self.c[jr];
                    for j in 0..n {
                        if bound[j] {
                            b += 2.0 * self.q[jr * n + j] * x[j];
                        }
                    }
                    rhs[r] = -b;
                }
                solve_spd(&mut a, &mut rhs, m);
                rhs
            };
            let inside = free
                .iter()
                .zip(&y)
                .all(|(&j, &v)| v >= lo[j] - 1e-12 && v <= hi[j] + 1e-12);
            if inside {
                for (&j, &v) in free.iter().zip(&y) {
                    x[j] = v.clamp(lo[j], hi[j]);
                }
                let g = self.gradient(&x);
                let mut release: Option<(usize, f64)> = None;
                for j in 0..n {
                    if !bound[j] || lo[j] == hi[j] {
                        continue;
                    }
                    let violation = if x[j] <= lo[j] { -g[j] } else { g[j] };
                    if violation > tol && release.is_none_or(|(_, v)| violation > v) {
                        release = Some((j, violation));
                    }
                }
                match release {
                    Some((j, _)) => bound[j] = false,
                    None => return x,
                }
            } else {
                let mut step = 1.0;
                let mut blocking = None;
                for (&j, &v) in free.iter().zip(&y) {
                    let d = v - x[j];
                    let ratio = if v < lo[j] {
                        (lo[j] - x[j]) / d
                    } else if v > hi[j] {
                        (hi[j] - x[j]) / d
                    } else {
                        continue;
                    };
                    if ratio < step {
                        step = ratio;
                        blocking = Some((j, v < lo[j]));
                    }
                }
                let step = step.max(0.0);
                for (&j, &v) in free.iter().zip(&y) {
                    x[j] = (x[j] + step * (v - x[j])).clamp(lo[j], hi[j]);
                }
                if let Some((j, at_lo)) = blocking {
                    x[j] = if at_lo { lo[j] } else { hi[j] };
                    bound[j] = true;
                }
            }
        }
        x
    }

    /// Certified lower bound on the box minimum from any point `x` in the box:
    /// `f(x) + min_{y ∈ box} ∇f(x)·(y − x)`.
    fn lower_bound(&self, x: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
        let g = self.gradient(x);
        let linear: f64 = (0..self.n)
            .map(|j| (g[j] * (lo[j] - x[j])).min(g[j] * (hi[j] - x[j])))
            .sum();
        self.value(x) + linear
    }
}

/// Solve `A y = b` in place for symmetric positive (semi)definite `A`; the
/// solution overwrites `b`. A tiny ridge is added if the factorization breaks down.
fn solve_spd(a: &mut [f64], b: &mut [f64], n: usize) {
    let trace: f64 = (0..n).map(|i| a[i * n + i]).sum::<f64>().abs().max(1e-300);
    let original = a.to_vec();
    let mut ridge = 0.0;
    loop {
        a.copy_from_slice(&original);
        for i in 0..n {
            a[i * n + i] += ridge;
        }
        let mut ok = true;
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= a[j * n + k] * a[j * n + k];
            }
            if !(d > 0.0) {
                ok = false;
                break;
            }
            let d = d.sqrt();
            a[j * n + j] = d;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= a[i * n + k] * a[j * n + k];
                }
                a[i * n + j] = s / d;
            }
        }
        if ok {
            break;
        }
        ridge = if ridge == 0.0 { 1e-14 * trace / n as f64 } else { ridge * 100.0 };
    }
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= a[i * n + k] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= a[k * n + i] * b[k];
        }
        b[i] = s / a[i * n + i];
    }
}

struct BranchAndBound<'a> {
    problem: &'a MpcProblem,
    form: QuadraticForm,
}

impl<'a> BranchAndBound<'a> {
    fn new(problem: &'a MpcProblem) -> Result<Self> {
        Ok(Self {
            problem,
            form: QuadraticForm::build(problem)?,
        })
    }

    fn to_plan(&self, x: &[f64]) -> Vec<Vec<bool>> {
        let h = self.problem.horizon;
        (0..self.problem.agents.len())
            .map(|i| (0..h).map(|t| x[i * h + t] >= 0.5).collect())
            .collect()
    }

    fn to_vector(&self, plan: &[Vec<bool>]) -> Vec<f64> {
        plan.iter().flat_map(|row| row.iter().map(|&b| f64::from(u8::from(b)))).collect()
    }

    /// Switch off any ON the lockout forbids, scanning forward in time.
    fn repair(&self, plan: &mut [Vec<bool>]) {
        for (row, agent) in plan.iter_mut().zip(&self.problem.agents) {
            let mut prev = agent.was_on;
            let mut free_from = agent.blocked_steps;
            for t in 0..row.len() {
                if row[t] && t < free_from {
                    row[t] = false;
                }
                if !row[t] && prev {
                    free_from = t + agent.lockout_steps;
                }
                prev = row[t];
            }
        }
    }

    /// Bounds implied by the fixings; `None` if the fixings already violate lockout.
    fn node_bounds(&self, fixed: &[i8]) -> Option<(Vec<f64>, Vec<f64>)> {
        let h = self.problem.horizon;
        let n = self.form.n;
        let mut lo = vec![0.0; n];
        let mut hi = vec![1.0; n];
        for (i, agent) in self.problem.agents.iter().enumerate() {
            let mut forced_off_until = agent.blocked_steps;
            let mut prev = if agent.was_on { 1 } else { 0 };
            for t in 0..h {
                let idx = i * h + t;
                let f = fixed[idx];
                if t < forced_off_until {
                    if f == 1 {
                        return None;
                    }
                    hi[idx] = 0.0;
                } else if f == 1 {
                    lo[idx] = 1.0;
                } else if f == 0 {
                    hi[idx] = 0.0;
                }
                let cur = if t < forced_off_until { 0 } else { f };
                if cur == 0 && prev == 1 {
                    forced_off_until = forced_off_until.max(t + agent.lockout_steps);
                }
                prev = cur;
            }
        }
        Some((lo, hi))
    }

    fn run(&self, gap: f64, budget: Option<Duration>) -> Result<MpcSolution> {
        let start = Instant::now();
        let n = self.form.n;
        let h = self.problem.horizon;
        let na = self.problem.agents.len();

        let mut best_plan = vec![vec![false; h]; na];
        let mut best = self.form.value(&self.to_vector(&best_plan));
        let mut nodes = 0usize;
        let mut timed_out = false;

        let mut stack: Vec<Vec<i8>> = vec![vec![-1; n]];
        while let Some(fixed) = stack.pop() {
            if let Some(limit) = budget {
                if start.elapsed() > limit {
                    timed_out = true;
                    break;
                }
            }
            nodes += 1;
            let Some((lo, hi)) = self.node_bounds(&fixed) else {
                continue;
            };
            let x = self.form.minimize_box(&lo, &hi);
            let bound = self.form.lower_bound(&x, &lo, &hi);
            let slack = gap * best.abs() + 1e-12 * best.abs().max(1e-12);
            if bound >= best - slack {
                continue;
            }

            let mut candidate = self.to_plan(&x);
            self.repair(&mut candidate);
            let value = self.form.value(&self.to_vector(&candidate));
            if value < best {
                best = value;
                best_plan = candidate;
            }

            let branch = (0..n)
                .filter(|&j| lo[j] < hi[j])
                .min_by(|&a, &b| (x[a] - 0.5).abs().total_cmp(&(x[b] - 0.5).abs()));
            let Some(j) = branch else {
                // Every variable is pinned: x is this leaf's only plan.
                let plan = self.to_plan(&x);
                if self.problem.plan_feasible(&plan) {
                    let v = self.form.value(&x);
                    if v < best {
                        best = v;
                        best_plan = plan;
                    }
                }
                continue;
            };
            let mut down = fixed.clone();
            down[j] = 0;
            let mut up = fixed;
            up[j] = 1;
            // Explore the side the relaxation leans toward first.
            if x[j] >= 0.5 {
                stack.push(down);
                stack.push(up);
            } else {
                stack.push(up);
                stack.push(down);
            }
        }

        Ok(MpcSolution {
            plan: best_plan,
            objective: best,
            timed_out,
            nodes,
        })
    }
}

/// Receding-horizon controller: re-plans every `dt` seconds and holds the
/// first planned action in between.
#[derive(Debug, Clone)]
pub struct MpcController {
    pub config: MpcConfig,
    held: Vec<bool>,
    steps_since_plan: usize,
    last: Option<MpcSolution>,
    timeouts: usize,
}

impl MpcController {
    pub fn new(config: MpcConfig) -> Self {
        Self {
            config,
            held: Vec::new(),
            steps_since_plan: 0,
            last: None,
            timeouts: 0,
        }
    }

    pub fn last_solution(&self) -> Option<&MpcSolution> {
        self.last.as_ref()
    }

    pub fn timeouts(&self) -> usize {
        self.timeouts
    }
}

impl Controller for MpcController {
    fn name(&self) -> String {
        "mpc".into()
    }

    fn is_decentralized(&self) -> bool {
        false
    }

    fn reset(&mut self, _env: &Env) -> Result<()> {
        self.held.clear();
        self.steps_since_plan = 0;
        self.last = None;
        Ok(())
    }

    fn act(&mut self, env: &Env) -> Result<Vec<bool>> {
        let every = ((self.config.dt / env.config().dt).round() as usize).max(1);
        if self.held.len() != env.n() || self.steps_since_plan % every == 0 {
            let problem = MpcProblem::from_env(env, &self.config)?;
            let solution = problem.solve(&self.config)?;
            if solution.timed_out {
                self.timeouts += 1;
                log::warn!("MPC re-plan hit its time budget; using best incumbent");
            }
            self.held = solution.first_actions();
            self.last = Some(solution);
            self.steps_since_plan = 0;
        }
        self.steps_since_plan += 1;
        Ok(self.held.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hvac::AcParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn agent(th: f64, tm: f64, unit: AcState) -> MpcAgent {
        let ac = AcParams::default();
        MpcAgent::from_unit(
            HouseState::new(th, tm),
            ThermalParams::default(),
            ac.power(),
            ac.heat(),
            &unit,
            ac.lockout_max,
            12.0,
        )
    }

    fn problem(agents: Vec<MpcAgent>, horizon: usize, signal: f64) -> MpcProblem {
        MpcProblem {
            agents,
            horizon,
            signal,
            target: 20.0,
            weights: RewardWeights::default(),
            outdoor: 31.0,
            solar: 0.0,
            dt: 12.0,
        }
    }

    pub(crate) fn random_problem(rng: &mut ChaCha8Rng, n: usize, h: usize) -> MpcProblem {
        let agents = (0..n)
            .map(|_| {
                let unit = match rng.random_range(0..3) {
                    0 => AcState { on: true, lockout_remaining: 0.0 },
                    1 => AcState { on: false, lockout_remaining: 4.0 * rng.random_range(1..=9) as f64 },
                    _ => AcState::off(),
                };
                agent(20.0 + rng.random_range(-1.0..1.5), 20.0 + rng.random_range(-1.0..1.5), unit)
            })
            .collect();
        let signal = rng.random_range(0.0..1.0) * 6000.0 * n as f64;
        problem(agents, h, signal)
    }

    #[test]
    fn affine_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coeffs = ThermalCoefficients::new(&ThermalParams::default(), 12.0).unwrap();
        let dyn_ = AffineDynamics::from_closed_form(&coeffs, 31.0, 0.0).unwrap();
        for _ in 0..1000 {
            let x = HouseState::new(rng.random_range(10.0..40.0), rng.random_range(10.0..40.0));
            let qa = if rng.random_bool(0.5) { -11_111.1 } else { 0.0 };
            let a = dyn_.apply(x, qa);
            let b = coeffs.step(x, 31.0, qa, 0.0).unwrap();
            assert!((a.th - b.th).abs() < 1e-9 && (a.tm - b.tm).abs() < 1e-9);
        }
    }

    #[test]
    fn quadratic_form_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = random_problem(&mut rng, 3, 4);
            let form = QuadraticForm::build(&p).unwrap();
            let plan: Vec<Vec<bool>> = (0..3).map(|_| (0..4).map(|_| rng.random_bool(0.5)).collect()).collect();
            let x: Vec<f64> = plan.iter().flatten().map(|b| f64::from(u8::from(*b))).collect();
            let a = form.value(&x);
            let b = p.simulated_objective(&plan).unwrap();
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn single_agent_at_target_no_signal_stays_off() {
        let p = problem(vec![agent(20.0, 20.0, AcState::off())], 1, 0.0);
        for solver in [MpcSolver::Enumerate, MpcSolver::BranchAndBound] {
            let cfg = MpcConfig { solver, horizon: 1, ..Default::default() };
            assert_eq!(p.solve(&cfg).unwrap().first_actions(), vec![false]);
        }
    }

    #[test]
    fn locked_agent_stays_off_until_expiry() {
        let locked = AcState { on: false, lockout_remaining: 36.0 };
        // Hot house with high signal: it wants to be on as soon as allowed.
        let p = problem(vec![agent(23.0, 22.0, locked)], 6, 6000.0);
        let a = &p.agents[0];
        assert_eq!(a.blocked_steps, 3);
        for solver in [MpcSolver::Enumerate, MpcSolver::BranchAndBound] {
            let cfg = MpcConfig { solver, horizon: 6, ..Default::default() };
            let sol = p.solve(&cfg).unwrap();
            assert!(sol.plan[0][..3].iter().all(|on| !on), "{:?}", sol.plan);
            assert!(sol.plan[0][3], "{:?}", sol.plan);
        }
    }

    #[test]
    fn row_feasibility_agrees_with_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2000 {
            let unit = match rng.random_range(0..3) {
                0 => AcState { on: true, lockout_remaining: 0.0 },
                1 => AcState { on: false, lockout_remaining: 4.0 * rng.random_range(1..=9) as f64 },
                _ => AcState::off(),
            };
            let a = agent(20.0, 20.0, unit);
            let row: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
            assert_eq!(
                a.row_feasible(&row),
                lockout_inequality_holds(&row, &a.history(), a.lockout_steps),
                "{unit:?} {row:?}"
            );
        }
    }

    #[test]
    fn branch_and_bound_matches_enumeration_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = rng.random_range(1..=2);
            let h = rng.random_range(1..=3);
            let p = random_problem(&mut rng, n, h);
            let e = enumerate_plans(&p).unwrap();
            let b = p.solve(&MpcConfig { solver: MpcSolver::BranchAndBound, horizon: h, ..Default::default() }).unwrap();
            assert!((e.objective - b.objective).abs() <= 1e-9 * e.objective.abs().max(1.0));
            assert!(p.plan_feasible(&b.plan));
            let sim = p.simulated_objective(&b.plan).unwrap();
            assert!((sim - b.objective).abs() <= 1e-9 * sim.abs().max(1.0));
        }
    }

    #[test]
    fn enumeration_rejects_large_instances() {
        let p = problem((0..5).map(|_| agent(20.0, 20.0, AcState::off())).collect(), 5, 0.0);
        assert!(enumerate_plans(&p).is_err());
    }

    #[test]
    fn box_minimizer_is_optimal_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..30 {
            let p = random_problem(&mut rng, 3, 3);
            let form = QuadraticForm::build(&p).unwrap();
            let lo = vec![0.0; form.n];
            let hi = vec![1.0; form.n];
            let x = form.minimize_box(&lo, &hi);
            let lb = form.lower_bound(&x, &lo, &hi);
            let v = form.value(&x);
            assert!(v - lb <= 1e-9 * v.abs().max(1.0), "gap {}", v - lb);
        }
    }
}
