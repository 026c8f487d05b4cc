//! Chance-constrained receding-horizon planner.
//!
//! The ego follows single-integrator dynamics `x_{k+1} = x_k + dt u_k` with
//! velocity controls. Controls come from a mode-coupled affine policy:
//! `u_0 = h_0 + sum_i K0_i o_i` is shared by every mode, and for `k >= 1`
//! `u_k^j = h_k^j + sum_i K_k^{ij} mu_k^{ij}` uses the predicted mean of agent
//! `i` under mode `j`. The cost is the mode-probability expectation of
//! reference tracking, control tracking and control smoothness; every
//! (agent, mode, step) triple contributes one exact keep-out constraint.
//!
//! [`rollout`], [`cost`] and [`constraints`] are world-frame reference
//! implementations. The optimizer itself works in an ego-centered frame through
//! precomputed affine maps from the decision vector to controls and states.

use nalgebra::{DVector, Matrix2xX};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_rect, CoverageLevel, KeepOut, Mat2, OverlapRect, Vec2};
use crate::prediction::{AgentState, GmmPrediction};
use crate::route::Polyline;
use crate::solver::{self, NlpProblem, SolveReport, SolveStatus, SolverOptions, SMOOTHING_TAU};

/// Maximum distance (m) between the ego and its route for a reference to be built.
pub const MAX_ROUTE_OFFSET: f64 = 50.0;

/// Rows per distinct control: 4 velocity bounds and 4 velocity-change bounds.
pub const ROWS_PER_CONTROL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub half_size: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPreset {
    /// 10 steps of 0.3 s.
    Short,
    /// 10 steps of 0.8 s.
    Long,
}

impl HorizonPreset {
    pub fn steps_dt(self) -> (usize, f64) {
        match self {
            HorizonPreset::Short => (10, 0.3),
            HorizonPreset::Long => (10, 0.8),
        }
    }
}

impl std::str::FromStr for HorizonPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(HorizonPreset::Short),
            "long" => Ok(HorizonPreset::Long),
            other => Err(Error::domain(format!("unknown horizon preset `{other}` (short|long)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Componentwise velocity box (m/s).
    pub v_min: [f64; 2],
    pub v_max: [f64; 2],
    /// Bounds on the per-step velocity change `u_{k+1} - u_k` (m/s per step).
    pub a_min: [f64; 2],
    pub a_max: [f64; 2],
    pub p_coverage: f64,
    /// Row-major weight matrices.
    pub q: [[f64; 2]; 2],
    pub r1: [[f64; 2]; 2],
    pub r2: [[f64; 2]; 2],
    pub max_agents: usize,
    /// Agents farther than this (m) get no collision constraints.
    pub agent_radius: f64,
    /// Optimize the feedback gains instead of holding them at zero.
    pub free_gains: bool,
    pub gain_ridge: f64,
    /// Cruise speed the reference accelerates toward; `None` keeps the current speed.
    pub target_speed: Option<f64>,
    /// Use the softmin surrogate instead of the signed distance for solver derivatives.
    pub smooth_collision: bool,
    pub solver: SolverOptions,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.3,
            v_min: [-15.0, -15.0],
            v_max: [15.0, 15.0],
            a_min: [-1.5, -1.5],
            a_max: [1.5, 1.5],
            p_coverage: 0.9,
            q: [[1.0, 0.0], [0.0, 1.0]],
            r1: [[0.1, 0.0], [0.0, 0.1]],
            r2: [[1.0, 0.0], [0.0, 1.0]],
            max_agents: 8,
            agent_radius: 50.0,
            free_gains: false,
            gain_ridge: 1e-6,
            target_speed: None,
            smooth_collision: false,
            solver: SolverOptions::default(),
        }
    }
}

fn mat(m: &[[f64; 2]; 2]) -> Mat2 {
    Mat2::new(m[0][0], m[0][1], m[1][0], m[1][1])
}

fn check_pd(name: &str, m: &[[f64; 2]; 2]) -> Result<()> {
    let m = mat(m);
    if m.iter().any(|v| !v.is_finite()) || (m[(0, 1)] - m[(1, 0)]).abs() > 1e-12 {
        return Err(Error::domain(format!("weight {name} must be finite and symmetric")));
    }
    if !(m[(0, 0)] > 0.0 && m.determinant() > 0.0) {
        return Err(Error::domain(format!("weight {name} must be positive definite")));
    }
    Ok(())
}

impl PlannerConfig {
    pub fn with_preset(preset: HorizonPreset) -> Self {
        let (horizon, dt) = preset.steps_dt();
        Self {
            horizon,
            dt,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::domain("horizon must be >= 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::domain(format!("dt must be positive, got {}", self.dt)));
        }
        for c in 0..2 {
            if !(self.v_min[c] < self.v_max[c]) {
                return Err(Error::domain("v_min must be < v_max componentwise"));
            }
            if !(self.a_min[c] < self.a_max[c]) {
                return Err(Error::domain("a_min must be < a_max componentwise"));
            }
        }
        if !(self.p_coverage > 0.0 && self.p_coverage < 1.0) {
            return Err(Error::domain(format!(
                "p_coverage must lie in (0, 1), got {}",
                self.p_coverage
            )));
        }
        check_pd("q", &self.q)?;
        check_pd("r1", &self.r1)?;
        check_pd("r2", &self.r2)?;
        if !(self.gain_ridge >= 0.0) {
            return Err(Error::domain("gain_ridge must be >= 0"));
        }
        if let Some(v) = self.target_speed {
            if !(v >= 0.0) {
                return Err(Error::domain("target_speed must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn coverage(&self) -> Result<CoverageLevel> {
        CoverageLevel::new(self.p_coverage)
    }

    fn speed_limit(&self) -> f64 {
        self.v_max[0].min(self.v_max[1]).max(0.0)
    }
}

/// Feedforward terms and feedback gains of the mode-coupled policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParameters {
    pub h0: Vec2,
    /// Per-agent gains of the shared first control.
    pub k0: Vec<Mat2>,
    /// `h[j][k - 1]` for steps `k = 1..N-1`.
    pub h: Vec<Vec<Vec2>>,
    /// `k[j][k - 1][i]`.
    pub k: Vec<Vec<Vec<Mat2>>>,
}

impl PolicyParameters {
    pub fn zeros(agents: usize, modes: usize, horizon: usize) -> Self {
        let later = horizon.saturating_sub(1);
        Self {
            h0: Vec2::zeros(),
            k0: vec![Mat2::zeros(); agents],
            h: vec![vec![Vec2::zeros(); later]; modes],
            k: vec![vec![vec![Mat2::zeros(); agents]; later]; modes],
        }
    }

    pub fn num_modes(&self) -> usize {
        self.h.len()
    }

    fn check_dims(&self, agents: usize, modes: usize, horizon: usize) -> Result<()> {
        let later = horizon.saturating_sub(1);
        let ok = self.k0.len() == agents
            && self.h.len() == modes
            && self.k.len() == modes
            && self.h.iter().all(|v| v.len() == later)
            && self
                .k
                .iter()
                .all(|v| v.len() == later && v.iter().all(|g| g.len() == agents));
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "policy dimensions do not match {agents} agents, {modes} modes, horizon {horizon}"
            )))
        }
    }
}

/// Per-mode controls (`N`) and states (`N + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub controls: Vec<Vec<Vec2>>,
    pub states: Vec<Vec<Vec2>>,
    /// Control applied before this plan; the first smoothness and
    /// velocity-change terms are taken against it.
    pub previous_control: Vec2,
}

/// Reference states (`N + 1`, starting on the route) and finite-difference controls (`N`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reference {
    pub states: Vec<Vec2>,
    pub controls: Vec<Vec2>,
}

fn check_predictions(preds: &[GmmPrediction], horizon: usize) -> Result<usize> {
    let modes = preds.first().map_or(1, |p| p.num_modes());
    for (i, p) in preds.iter().enumerate() {
        if p.num_modes() != modes {
            return Err(Error::domain(format!(
                "agent {i} has {} modes but agent 0 has {modes}; the mode index is shared",
                p.num_modes()
            )));
        }
        if p.horizon() < horizon {
            return Err(Error::domain(format!(
                "agent {i} prediction horizon {} is shorter than the planning horizon {horizon}",
                p.horizon()
            )));
        }
    }
    Ok(modes)
}

/// Mode distribution for the cost expectation: the per-agent mode
/// probabilities averaged over agents (a single certain mode without agents).
pub fn mode_probabilities(preds: &[GmmPrediction]) -> Vec<f64> {
    if preds.is_empty() {
        return vec![1.0];
    }
    let modes = preds[0].num_modes();
    let mut out = vec![0.0; modes];
    for p in preds {
        for (o, m) in out.iter_mut().zip(p.modes()) {
            *o += m.prob;
        }
    }
    let total: f64 = out.iter().sum();
    out.iter().map(|v| v / total).collect()
}

/// Simulates the policy through the ego dynamics in the world frame.
pub fn rollout(
    params: &PolicyParameters,
    ego: &EgoState,
    nevs: &[AgentState],
    preds: &[GmmPrediction],
    cfg: &PlannerConfig,
) -> Result<Rollout> {
    if nevs.len() != preds.len() {
        return Err(Error::domain("need exactly one prediction per agent"));
    }
    let n = cfg.horizon;
    let modes = check_predictions(preds, n)?;
    params.check_dims(nevs.len(), modes, n)?;
    let origin = ego.position;
    let mut u0 = params.h0;
    for (k, a) in params.k0.iter().zip(nevs) {
        u0 += k * (a.position - origin);
    }
    let mut controls = Vec::with_capacity(modes);
    let mut states = Vec::with_capacity(modes);
    for j in 0..modes {
        let mut us = Vec::with_capacity(n);
        us.push(u0);
        for k in 1..n {
            let mut u = params.h[j][k - 1];
            for (i, p) in preds.iter().enumerate() {
                u += params.k[j][k - 1][i] * (p.modes()[j].means[k - 1] - origin);
            }
            us.push(u);
        }
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(origin);
        for (k, u) in us.iter().enumerate() {
            xs.push(xs[k] + u * cfg.dt);
        }
        controls.push(us);
        states.push(xs);
    }
    Ok(Rollout {
        controls,
        states,
        previous_control: ego.velocity,
    })
}

/// Expected tracking, control and smoothness cost.
pub fn cost(
    params: &PolicyParameters,
    roll: &Rollout,
    reference: &Reference,
    mode_probs: &[f64],
    cfg: &PlannerConfig,
) -> Result<f64> {
    let n = cfg.horizon;
    if reference.states.len() != n + 1 || reference.controls.len() != n {
        return Err(Error::domain(format!(
            "reference needs {} states and {n} controls, got {} and {}",
            n + 1,
            reference.states.len(),
            reference.controls.len()
        )));
    }
    if mode_probs.len() != roll.controls.len() || roll.controls.iter().any(|u| u.len() != n) {
        return Err(Error::domain(
            "rollout does not match the mode probabilities or horizon",
        ));
    }
    let (q, r1, r2) = (mat(&cfg.q), mat(&cfg.r1), mat(&cfg.r2));
    let mut total = 0.0;
    for (j, pj) in mode_probs.iter().enumerate() {
        let mut sum = 0.0;
        for k in 0..n {
            let dx = roll.states[j][k + 1] - reference.states[k + 1];
            let du = roll.controls[j][k] - reference.controls[k];
            let prev = if k == 0 {
                roll.previous_control
            } else {
                roll.controls[j][k - 1]
            };
            let dd = roll.controls[j][k] - prev;
            sum += dx.dot(&(q * dx)) + du.dot(&(r1 * du)) + dd.dot(&(r2 * dd));
        }
        total += pj * sum;
    }
    if cfg.free_gains {
        let gains = params
            .k0
            .iter()
            .chain(params.k.iter().flatten().flatten())
            .map(|m| m.norm_squared())
            .sum::<f64>();
        total += cfg.gain_ridge * gains;
    }
    Ok(total)
}

/// Overlap rectangle between the ego and each agent.
fn rects(ego: &EgoState, nevs: &[AgentState]) -> Result<Vec<OverlapRect>> {
    nevs.iter().map(|a| overlap_rect(ego.half_size, a.half_size)).collect()
}

fn bound_rows(u: Vec2, prev: Vec2, cfg: &PlannerConfig, out: &mut Vec<f64>) {
    let d = u - prev;
    out.extend_from_slice(&[
        u.x - cfg.v_min[0],
        u.y - cfg.v_min[1],
        cfg.v_max[0] - u.x,
        cfg.v_max[1] - u.y,
        d.x - cfg.a_min[0],
        d.y - cfg.a_min[1],
        cfg.a_max[0] - d.x,
        cfg.a_max[1] - d.y,
    ]);
}

/// Clamps the pre-plan control into the velocity box so the first
/// velocity-change rows never start out unsatisfiable.
fn clamp_previous(u: Vec2, cfg: &PlannerConfig) -> Vec2 {
    Vec2::new(
        u.x.clamp(cfg.v_min[0], cfg.v_max[0]),
        u.y.clamp(cfg.v_min[1], cfg.v_max[1]),
    )
}

/// All constraint values (feasible when `>= 0`): 8 bound rows for the shared
/// first control and for every later per-mode control, then one exact
/// keep-out margin per (agent, mode, step) with the step index fastest.
pub fn constraints(
    roll: &Rollout,
    ego: &EgoState,
    nevs: &[AgentState],
    preds: &[GmmPrediction],
    cfg: &PlannerConfig,
) -> Result<Vec<f64>> {
    let n = cfg.horizon;
    let modes = roll.controls.len();
    let rects = rects(ego, nevs)?;
    let beta = cfg.coverage()?.beta;
    let mut out = Vec::with_capacity(ROWS_PER_CONTROL * (1 + modes * (n - 1)) + nevs.len() * modes * n);
    let prev = clamp_previous(roll.previous_control, cfg);
    bound_rows(roll.controls[0][0], prev, cfg, &mut out);
    for us in &roll.controls {
        for k in 1..n {
            bound_rows(us[k], us[k - 1], cfg, &mut out);
        }
    }
    for (i, p) in preds.iter().enumerate() {
        for j in 0..modes {
            let mode = &p.modes()[j];
            for k in 0..n {
                let ko = KeepOut::new(mode.means[k], &mode.covs[k], rects[i], beta)?;
                out.push(ko.margin(&roll.states[j][k + 1]));
            }
        }
    }
    Ok(out)
}

/// Number of constraint rows for the given problem size.
pub fn constraint_count(horizon: usize, modes: usize, agents: usize) -> usize {
    ROWS_PER_CONTROL * (1 + modes * (horizon - 1)) + agents * modes * horizon
}

/// Projects the ego onto `route` and advances along it for `N` steps.
pub fn build_reference(route: &Polyline, ego: &EgoState, cfg: &PlannerConfig) -> Result<Reference> {
    let proj = route.project(&ego.position);
    if proj.distance > MAX_ROUTE_OFFSET {
        return Err(Error::domain(format!(
            "ego is {:.1} m from its route (limit {MAX_ROUTE_OFFSET} m)",
            proj.distance
        )));
    }
    let limit = cfg.speed_limit();
    let mut speed = ego.velocity.norm().clamp(0.0, limit);
    let mut s = proj.s;
    let mut states = Vec::with_capacity(cfg.horizon + 1);
    states.push(route.point_at(s));
    for _ in 0..cfg.horizon {
        if let Some(target) = cfg.target_speed {
            let target = target.min(limit);
            speed = (speed + (target - speed).clamp(cfg.a_min[0], cfg.a_max[0])).clamp(0.0, limit);
        }
        s += speed * cfg.dt;
        states.push(route.point_at(s));
    }
    let controls = states.windows(2).map(|w| (w[1] - w[0]) / cfg.dt).collect();
    Ok(Reference { states, controls })
}

/// Indices of the `max_agents` nearest agents within `agent_radius`.
pub fn select_agents(ego: &EgoState, nevs: &[AgentState], cfg: &PlannerConfig) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = nevs
        .iter()
        .enumerate()
        .map(|(i, a)| (i, (a.position - ego.position).norm()))
        .filter(|(_, d)| *d <= cfg.agent_radius)
        .collect();
    idx.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    idx.into_iter().take(cfg.max_agents).map(|(i, _)| i).collect()
}

/// Position of each policy parameter in the decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub agents: usize,
    pub modes: usize,
    pub horizon: usize,
    pub free_gains: bool,
}

impl ParamLayout {
    fn h_len(&self) -> usize {
        2 + 2 * self.modes * (self.horizon - 1)
    }

    pub fn dim(&self) -> usize {
        let gains = if self.free_gains {
            4 * self.agents * (1 + self.modes * (self.horizon - 1))
        } else {
            0
        };
        self.h_len() + gains
    }

    fn h_index(&self, j: usize, k: usize) -> usize {
        2 + 2 * (j * (self.horizon - 1) + (k - 1))
    }

    fn k0_index(&self, i: usize) -> usize {
        self.h_len() + 4 * i
    }

    fn k_index(&self, j: usize, k: usize, i: usize) -> usize {
        self.h_len() + 4 * (self.agents + (j * (self.horizon - 1) + (k - 1)) * self.agents + i)
    }

    pub fn pack(&self, p: &PolicyParameters) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        x[0] = p.h0.x;
        x[1] = p.h0.y;
        for j in 0..self.modes {
            for k in 1..self.horizon {
                let o = self.h_index(j, k);
                x[o] = p.h[j][k - 1].x;
                x[o + 1] = p.h[j][k - 1].y;
            }
        }
        if self.free_gains {
            let put = |x: &mut Vec<f64>, o: usize, m: &Mat2| {
                x[o..o + 4].copy_from_slice(&[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]);
            };
            for i in 0..self.agents {
                put(&mut x, self.k0_index(i), &p.k0[i]);
                for j in 0..self.modes {
                    for k in 1..self.horizon {
                        put(&mut x, self.k_index(j, k, i), &p.k[j][k - 1][i]);
                    }
                }
            }
        }
        x
    }

    /// Inverse of [`Self::pack`]; frozen gains are copied from `base`.
    pub fn unpack(&self, x: &[f64], base: &PolicyParameters) -> PolicyParameters {
        let mut p = base.clone();
        p.h0 = Vec2::new(x[0], x[1]);
        for j in 0..self.modes {
            for k in 1..self.horizon {
                let o = self.h_index(j, k);
                p.h[j][k - 1] = Vec2::new(x[o], x[o + 1]);
            }
        }
        if self.free_gains {
            let get = |o: usize| Mat2::new(x[o], x[o + 1], x[o + 2], x[o + 3]);
            for i in 0..self.agents {
                p.k0[i] = get(self.k0_index(i));
                for j in 0..self.modes {
                    for k in 1..self.horizon {
                        p.k[j][k - 1][i] = get(self.k_index(j, k, i));
                    }
                }
            }
        }
        p
    }
}

/// Ego-frame planning problem over the packed policy parameters.
pub struct PlanningProblem {
    layout: ParamLayout,
    cfg: PlannerConfig,
    probs: Vec<f64>,
    /// Affine map `u_q = A_q theta + b_q` for each distinct control; index 0 is
    /// the shared first control, then `1 + j (N - 1) + (k - 1)`.
    ctrl_a: Vec<Matrix2xX<f64>>,
    ctrl_b: Vec<Vec2>,
    /// `state_a[j][k - 1]`, `state_b[j][k - 1]` for `x_k`, `k = 1..N`.
    state_a: Vec<Vec<Matrix2xX<f64>>>,
    state_b: Vec<Vec<Vec2>>,
    x_ref: Vec<Vec2>,
    u_ref: Vec<Vec2>,
    u_prev: Vec2,
    /// `keepouts[i][j][k - 1]` constrains `x_k`.
    keepouts: Vec<Vec<Vec<KeepOut>>>,
    q: Mat2,
    r1: Mat2,
    r2: Mat2,
    num_bound_rows: usize,
}

impl PlanningProblem {
    /// Builds the problem. `nevs`/`preds` are the already-selected agents.
    pub fn new(
        ego: &EgoState,
        nevs: &[AgentState],
        preds: &[GmmPrediction],
        reference: &Reference,
        base: &PolicyParameters,
        cfg: &PlannerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if nevs.len() != preds.len() {
            return Err(Error::domain("need exactly one prediction per agent"));
        }
        let n = cfg.horizon;
        let modes = check_predictions(preds, n)?;
        base.check_dims(nevs.len(), modes, n)?;
        if reference.states.len() != n + 1 || reference.controls.len() != n {
            return Err(Error::domain("reference length does not match the horizon"));
        }
        let layout = ParamLayout {
            agents: nevs.len(),
            modes,
            horizon: n,
            free_gains: cfg.free_gains,
        };
        let dim = layout.dim();
        let origin = ego.position;
        let rel_o: Vec<Vec2> = nevs.iter().map(|a| a.position - origin).collect();

        let controls = 1 + modes * (n - 1);
        let mut ctrl_a = Vec::with_capacity(controls);
        let mut ctrl_b = Vec::with_capacity(controls);
        // Feedback contribution `K o`: a free gain adds columns, a frozen one an offset.
        let gain_terms = |a: &mut Matrix2xX<f64>, b: &mut Vec2, off: usize, gain: &Mat2, o: &Vec2| {
            if cfg.free_gains {
                for c in 0..2 {
                    for d in 0..2 {
                        a[(c, off + 2 * c + d)] = o[d];
                    }
                }
            } else {
                *b += gain * o;
            }
        };
        let mut a0 = Matrix2xX::zeros(dim);
        a0[(0, 0)] = 1.0;
        a0[(1, 1)] = 1.0;
        let mut b0 = Vec2::zeros();
        for i in 0..nevs.len() {
            gain_terms(&mut a0, &mut b0, layout.k0_index(i), &base.k0[i], &rel_o[i]);
        }
        ctrl_a.push(a0);
        ctrl_b.push(b0);
        for j in 0..modes {
            for k in 1..n {
                let mut a = Matrix2xX::zeros(dim);
                let o = layout.h_index(j, k);
                a[(0, o)] = 1.0;
                a[(1, o + 1)] = 1.0;
                let mut b = Vec2::zeros();
                for (i, p) in preds.iter().enumerate() {
                    let mu = p.modes()[j].means[k - 1] - origin;
                    let off = if cfg.free_gains { layout.k_index(j, k, i) } else { 0 };
                    gain_terms(&mut a, &mut b, off, &base.k[j][k - 1][i], &mu);
                }
                ctrl_a.push(a);
                ctrl_b.push(b);
            }
        }

        let mut state_a = Vec::with_capacity(modes);
        let mut state_b = Vec::with_capacity(modes);
        for j in 0..modes {
            let mut acc_a = Matrix2xX::zeros(dim);
            let mut acc_b = Vec2::zeros();
            let mut sa = Vec::with_capacity(n);
            let mut sb = Vec::with_capacity(n);
            for k in 0..n {
                let q = control_index(j, k, n);
                acc_a += &ctrl_a[q] * cfg.dt;
                acc_b += ctrl_b[q] * cfg.dt;
                sa.push(acc_a.clone());
                sb.push(acc_b);
            }
            state_a.push(sa);
            state_b.push(sb);
        }

        let rect_list = rects(ego, nevs)?;
        let beta = cfg.coverage()?.beta;
        let mut keepouts = Vec::with_capacity(nevs.len());
        for (i, p) in preds.iter().enumerate() {
            let mut per_mode = Vec::with_capacity(modes);
            for mode in p.modes() {
                let row = (0..n)
                    .map(|k| KeepOut::new(mode.means[k] - origin, &mode.covs[k], rect_list[i], beta))
                    .collect::<Result<Vec<_>>>()?;
                per_mode.push(row);
            }
            keepouts.push(per_mode);
        }

        Ok(Self {
            layout,
            cfg: cfg.clone(),
            probs: mode_probabilities(preds),
            ctrl_a,
            ctrl_b,
            state_a,
            state_b,
            x_ref: reference.states.iter().map(|x| x - origin).collect(),
            u_ref: reference.controls.clone(),
            u_prev: ego.velocity,
            keepouts,
            q: mat(&cfg.q),
            r1: mat(&cfg.r1),
            r2: mat(&cfg.r2),
            num_bound_rows: ROWS_PER_CONTROL * controls,
        })
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    fn controls_of(&self, theta: &DVector<f64>) -> Vec<Vec2> {
        self.ctrl_a
            .iter()
            .zip(&self.ctrl_b)
            .map(|(a, b)| a * theta + b)
            .collect()
    }

    fn states_of(&self, theta: &DVector<f64>) -> Vec<Vec<Vec2>> {
        self.state_a
            .iter()
            .zip(&self.state_b)
            .map(|(sa, sb)| sa.iter().zip(sb).map(|(a, b)| a * theta + b).collect())
            .collect()
    }

    fn gain_range(&self) -> std::ops::Range<usize> {
        if self.layout.free_gains {
            self.layout.h_len()..self.layout.dim()
        } else {
            0..0
        }
    }

    fn num_collision_rows(&self) -> usize {
        self.keepouts.len() * self.layout.modes * self.layout.horizon
    }

    fn collision_eval(&self, ko: &KeepOut, x: &Vec2) -> (f64, Vec2) {
        if self.cfg.smooth_collision {
            solver::smooth_margin_grad(ko, x, SMOOTHING_TAU)
        } else {
            ko.signed_margin_grad(x)
        }
    }
}

fn control_index(j: usize, k: usize, n: usize) -> usize {
    if k == 0 {
        0
    } else {
        1 + j * (n - 1) + (k - 1)
    }
}

impl NlpProblem for PlanningProblem {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn num_constraints(&self) -> usize {
        self.num_bound_rows + self.num_collision_rows()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let theta = DVector::from_column_slice(x);
        let us = self.controls_of(&theta);
        let xs = self.states_of(&theta);
        let n = self.layout.horizon;
        let mut total = 0.0;
        for (j, pj) in self.probs.iter().enumerate() {
            let mut sum = 0.0;
            for k in 0..n {
                let u = us[control_index(j, k, n)];
                let prev = if k == 0 {
                    self.u_prev
                } else {
                    us[control_index(j, k - 1, n)]
                };
                let dx = xs[j][k] - self.x_ref[k + 1];
                let du = u - self.u_ref[k];
                let dd = u - prev;
                sum += dx.dot(&(self.q * dx)) + du.dot(&(self.r1 * du)) + dd.dot(&(self.r2 * dd));
            }
            total += pj * sum;
        }
        total + self.cfg.gain_ridge * x[self.gain_range()].iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, x: &[f64], grad: &mut [f64]) -> bool {
        let theta = DVector::from_column_slice(x);
        let us = self.controls_of(&theta);
        let xs = self.states_of(&theta);
        let n = self.layout.horizon;
        let (q2, r12, r22) = (
            self.q + self.q.transpose(),
            self.r1 + self.r1.transpose(),
            self.r2 + self.r2.transpose(),
        );
        let mut g = DVector::zeros(x.len());
        for (j, pj) in self.probs.iter().enumerate() {
            for k in 0..n {
                let qk = control_index(j, k, n);
                let u = us[qk];
                let dx = xs[j][k] - self.x_ref[k + 1];
                g += self.state_a[j][k].transpose() * (q2 * dx * *pj);
                let mut gu = r12 * (u - self.u_ref[k]);
                let prev = if k == 0 {
                    self.u_prev
                } else {
                    us[control_index(j, k - 1, n)]
                };
                let dd = r22 * (u - prev);
                gu += dd;
                g += self.ctrl_a[qk].transpose() * (gu * *pj);
                if k > 0 {
                    g -= self.ctrl_a[control_index(j, k - 1, n)].transpose() * (dd * *pj);
                }
            }
        }
        for i in self.gain_range() {
            g[i] += 2.0 * self.cfg.gain_ridge * x[i];
        }
        grad.copy_from_slice(g.as_slice());
        true
    }

    fn constraints(&self, x: &[f64], out: &mut [f64]) {
        self.fill_constraints(x, out, false);
    }

    fn exact_constraints(&self, x: &[f64], out: &mut [f64]) {
        self.fill_constraints(x, out, true);
    }

    fn jacobian(&self, x: &[f64], jac: &mut [f64]) -> bool {
        let dim = self.layout.dim();
        let n = self.layout.horizon;
        let theta = DVector::from_column_slice(x);
        jac.iter_mut().for_each(|v| *v = 0.0);
        let mut row = 0;
        let put_bounds = |jac: &mut [f64], a: &Matrix2xX<f64>, pred: Option<&Matrix2xX<f64>>, row: &mut usize| {
            for (sign, block) in [(1.0, 0), (-1.0, 2), (1.0, 4), (-1.0, 6)] {
                for c in 0..2 {
                    let r = *row + block + c;
                    for col in 0..dim {
                        let mut v = a[(c, col)];
                        if block >= 4 {
                            if let Some(p) = pred {
                                v -= p[(c, col)];
                            }
                        }
                        jac[r * dim + col] = sign * v;
                    }
                }
            }
            *row += ROWS_PER_CONTROL;
        };
        put_bounds(jac, &self.ctrl_a[0], None, &mut row);
        for j in 0..self.layout.modes {
            for k in 1..n {
                let q = control_index(j, k, n);
                let p = control_index(j, k - 1, n);
                put_bounds(jac, &self.ctrl_a[q], Some(&self.ctrl_a[p]), &mut row);
            }
        }
        let xs = self.states_of(&theta);
        for per_agent in &self.keepouts {
            for (j, per_mode) in per_agent.iter().enumerate() {
                for (k, ko) in per_mode.iter().enumerate() {
                    let (_, gx) = self.collision_eval(ko, &xs[j][k]);
                    let grow = self.state_a[j][k].transpose() * gx;
                    jac[row * dim..(row + 1) * dim].copy_from_slice(grow.as_slice());
                    row += 1;
                }
            }
        }
        true
    }

    fn is_soft(&self, i: usize) -> bool {
        i >= self.num_bound_rows
    }
}

impl PlanningProblem {
    fn fill_constraints(&self, x: &[f64], out: &mut [f64], exact: bool) {
        let theta = DVector::from_column_slice(x);
        let us = self.controls_of(&theta);
        let n = self.layout.horizon;
        let mut rows = Vec::with_capacity(out.len());
        bound_rows(us[0], clamp_previous(self.u_prev, &self.cfg), &self.cfg, &mut rows);
        for j in 0..self.layout.modes {
            for k in 1..n {
                bound_rows(
                    us[control_index(j, k, n)],
                    us[control_index(j, k - 1, n)],
                    &self.cfg,
                    &mut rows,
                );
            }
        }
        let xs = self.states_of(&theta);
        for per_agent in &self.keepouts {
            for (j, per_mode) in per_agent.iter().enumerate() {
                for (k, ko) in per_mode.iter().enumerate() {
                    rows.push(if exact {
                        ko.margin(&xs[j][k])
                    } else {
                        self.collision_eval(ko, &xs[j][k]).0
                    });
                }
            }
        }
        out.copy_from_slice(&rows);
    }

    /// Initial decision vector that brakes as hard as the velocity-change
    /// bounds allow, heading along the reference.
    pub fn braking_guess(&self) -> Vec<f64> {
        let decel = self.cfg.a_min.iter().map(|a| -a).fold(f64::INFINITY, f64::min).max(0.0);
        let speed0 = self.u_prev.norm();
        let n = self.layout.horizon;
        let control = |k: usize| {
            let dir = if self.u_ref[k].norm() > 1e-9 {
                self.u_ref[k].normalize()
            } else if speed0 > 1e-9 {
                self.u_prev / speed0
            } else {
                Vec2::zeros()
            };
            dir * (speed0 - decel * (k + 1) as f64).max(0.0)
        };
        let mut x = vec![0.0; self.layout.dim()];
        let first = control(0) - self.ctrl_b[0];
        x[0] = first.x;
        x[1] = first.y;
        for j in 0..self.layout.modes {
            for k in 1..n {
                let o = self.layout.h_index(j, k);
                let u = control(k) - self.ctrl_b[control_index(j, k, n)];
                x[o] = u.x;
                x[o + 1] = u.y;
            }
        }
        x
    }

    /// Initial decision vector tracking the reference controls.
    pub fn reference_guess(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.layout.dim()];
        let first = self.u_ref[0] - self.ctrl_b[0];
        x[0] = first.x;
        x[1] = first.y;
        for j in 0..self.layout.modes {
            for k in 1..self.layout.horizon {
                let o = self.layout.h_index(j, k);
                let u = self.u_ref[k] - self.ctrl_b[control_index(j, k, self.layout.horizon)];
                x[o] = u.x;
                x[o + 1] = u.y;
            }
        }
        x
    }
}

/// Solver state carried between consecutive plans.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub layout: ParamLayout,
    pub theta: Vec<f64>,
    pub multipliers: Option<Vec<f64>>,
}

impl WarmStart {
    /// Advances the solution one step: every mode's step `k + 1` becomes step
    /// `k`, the last step is repeated, and the new shared first control is the
    /// most probable mode's old second control.
    pub fn shifted(&self, probs: &[f64]) -> Self {
        let l = self.layout;
        let mut theta = self.theta.clone();
        if l.horizon >= 2 {
            let best = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map_or(0, |(j, _)| j);
            let o = l.h_index(best.min(l.modes - 1), 1);
            theta[0] = self.theta[o];
            theta[1] = self.theta[o + 1];
            for j in 0..l.modes {
                for k in 1..l.horizon {
                    let src = l.h_index(j, (k + 1).min(l.horizon - 1));
                    let dst = l.h_index(j, k);
                    theta[dst] = self.theta[src];
                    theta[dst + 1] = self.theta[src + 1];
                }
            }
        }
        Self {
            layout: l,
            theta,
            multipliers: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionMargin {
    /// Index into the caller's agent list.
    pub agent: usize,
    pub mode: usize,
    /// Predicted step (1-based state index).
    pub step: usize,
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModePlan {
    pub prob: f64,
    pub states: Vec<Vec2>,
    pub controls: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub first_control: Vec2,
    pub params: PolicyParameters,
    pub modes: Vec<ModePlan>,
    pub reference: Reference,
    pub cost: f64,
    pub margins: Vec<CollisionMargin>,
    pub constraint_values: Vec<f64>,
    pub max_violation: f64,
    pub status: SolveStatus,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Caller indices of the constrained agents.
    pub agents: Vec<usize>,
    pub warm_start: WarmStart,
}

impl PlanResult {
    pub fn min_margin(&self) -> f64 {
        self.margins.iter().map(|m| m.margin).fold(f64::INFINITY, f64::min)
    }
}

/// Feasible beats infeasible, then lower objective; among infeasible
/// reports, lower violation.
fn better(a: &SolveReport, b: &SolveReport, tol: f64) -> bool {
    match (a.max_violation <= tol, b.max_violation <= tol) {
        (true, false) => true,
        (false, true) => false,
        (true, true) => a.objective < b.objective,
        (false, false) => a.max_violation < b.max_violation,
    }
}

/// Solves one receding-horizon problem.
///
/// `preds[i]` belongs to `nevs[i]`. Only the nearest `max_agents` agents within
/// `agent_radius` are constrained. Solver failures yield a `Degraded` result
/// built from the best available iterate rather than an error.
pub fn plan(
    ego: &EgoState,
    nevs: &[AgentState],
    preds: &[GmmPrediction],
    route: Option<&Polyline>,
    cfg: &PlannerConfig,
    warm: Option<&WarmStart>,
) -> Result<PlanResult> {
    cfg.validate()?;
    let route = route.ok_or_else(|| Error::domain("plan needs a reference route"))?;
    if nevs.len() != preds.len() {
        return Err(Error::domain("need exactly one prediction per agent"));
    }
    let reference = build_reference(route, ego, cfg)?;
    let chosen = select_agents(ego, nevs, cfg);
    let sel_nevs: Vec<AgentState> = chosen.iter().map(|&i| nevs[i]).collect();
    let sel_preds: Vec<GmmPrediction> = chosen.iter().map(|&i| preds[i].clone()).collect();
    let modes = check_predictions(&sel_preds, cfg.horizon)?;
    let base = PolicyParameters::zeros(sel_nevs.len(), modes, cfg.horizon);
    let problem = PlanningProblem::new(ego, &sel_nevs, &sel_preds, &reference, &base, cfg)?;
    let layout = problem.layout();

    let mut starts: Vec<(Vec<f64>, Option<Vec<f64>>)> = Vec::with_capacity(3);
    if let Some(w) = warm.filter(|w| w.layout == layout && w.theta.iter().all(|v| v.is_finite())) {
        let lambda = w
            .multipliers
            .as_ref()
            .filter(|m| m.len() == problem.num_constraints())
            .cloned();
        starts.push((w.theta.clone(), lambda));
    }
    starts.push((problem.reference_guess(), None));
    starts.push((problem.braking_guess(), None));

    // Later starts are tried only while no start has reached a converged, feasible plan.
    let mut best: Option<SolveReport> = None;
    for (x0, lambda0) in &starts {
        let Ok(report) = solver::solve_from(&problem, x0, lambda0.as_deref(), &cfg.solver) else {
            continue;
        };
        let done = report.status == SolveStatus::Optimal;
        if best
            .as_ref()
            .map_or(true, |b| better(&report, b, cfg.solver.feasibility_tol))
        {
            best = Some(report);
        }
        if done {
            break;
        }
    }
    let (theta, multipliers, status, outer, inner) = match best {
        Some(r) => (
            r.x,
            Some(r.multipliers),
            r.status,
            r.outer_iterations,
            r.inner_iterations,
        ),
        None => (starts[0].0.clone(), None, SolveStatus::Degraded, 0, 0),
    };

    let params = layout.unpack(&theta, &base);
    let roll = rollout(&params, ego, &sel_nevs, &sel_preds, cfg)?;
    let probs = mode_probabilities(&sel_preds);
    let total_cost = cost(&params, &roll, &reference, &probs, cfg)?;
    let values = constraints(&roll, ego, &sel_nevs, &sel_preds, cfg)?;
    let max_violation = values.iter().fold(0.0f64, |a, v| a.max(-v));
    let status = if max_violation > cfg.solver.feasibility_tol {
        SolveStatus::Degraded
    } else {
        status
    };

    let n = cfg.horizon;
    let bound_rows = ROWS_PER_CONTROL * (1 + modes * (n - 1));
    let mut margins = Vec::with_capacity(values.len() - bound_rows);
    let mut it = values[bound_rows..].iter();
    for &agent in &chosen {
        for mode in 0..modes {
            for k in 0..n {
                margins.push(CollisionMargin {
                    agent,
                    mode,
                    step: k + 1,
                    margin: *it.next().expect("one margin per (agent, mode, step)"),
                });
            }
        }
    }

    let modes_out = roll
        .controls
        .iter()
        .zip(&roll.states)
        .zip(&probs)
        .map(|((u, x), p)| ModePlan {
            prob: *p,
            states: x.clone(),
            controls: u.clone(),
        })
        .collect();

    Ok(PlanResult {
        first_control: roll.controls[0][0],
        params,
        modes: modes_out,
        reference,
        cost: total_cost,
        margins,
        constraint_values: values,
        max_violation,
        status,
        outer_iterations: outer,
        inner_iterations: inner,
        agents: chosen,
        warm_start: WarmStart {
            layout,
            theta,
            multipliers,
        },
    })
}
