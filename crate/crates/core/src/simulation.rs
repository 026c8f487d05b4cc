//! Closed-loop simulation: scenarios, IDM background traffic, per-step
//! replanning and rollout logs.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{overlap_rect, Vec2};
use crate::planner::{self, EgoState, PlannerConfig, WarmStart};
use crate::prediction::{
    constant_velocity_predict, scale_covariances, wrap_angle, AgentState, GmmPrediction, ModeRecord, PredictionRecord,
    DEFAULT_CV_SIGMA2,
};
use crate::route::{Polyline, ROUTE_SPACING, ROUTE_WINDOW_POINTS};
use crate::solver::SolveStatus;

/// Agents must start within this distance (m) of their route.
pub const MAX_AGENT_ROUTE_OFFSET: f64 = 5.0;
/// Half-width (m) of the corridor in which a vehicle counts as an IDM leader.
pub const LEADER_CORRIDOR: f64 = 2.0;
/// Hardest deceleration (m/s^2) an IDM agent can apply.
pub const IDM_MAX_DECEL: f64 = 9.0;
/// Relative spread of the seeded initial-speed jitter for agents.
pub const SPEED_JITTER: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub name: String,
    pub waypoints: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub heading: f64,
    pub half_size: [f64; 2],
    pub route: String,
    pub goal_s: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdmOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desired_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_headway: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_gap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_accel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comfort_decel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    pub heading: f64,
    pub half_size: [f64; 2],
    pub route: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idm: Option<IdmOverrides>,
}

/// Scenario file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: String,
    pub dt: f64,
    pub duration: usize,
    pub expert_progress: f64,
    pub routes: Vec<RouteSpec>,
    pub ego: EgoSpec,
    #[serde(default)]
    pub agents: Vec<AgentSpec>,
}

/// A validated scenario with its routes resampled to [`ROUTE_SPACING`].
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    routes: Vec<Polyline>,
    ego_route: usize,
    agent_routes: Vec<usize>,
}

fn v2(p: [f64; 2]) -> Vec2 {
    Vec2::new(p[0], p[1])
}

fn check_state(field: &str, position: [f64; 2], velocity: [f64; 2], heading: f64, half: [f64; 2]) -> Result<()> {
    if position
        .iter()
        .chain(&velocity)
        .chain(&[heading])
        .any(|v| !v.is_finite())
    {
        return Err(Error::schema(field, "state entries must be finite"));
    }
    if !(half[0] > 0.0 && half[1] > 0.0) {
        return Err(Error::schema(
            format!("{field}.half_size"),
            "half extents must be positive",
        ));
    }
    Ok(())
}

impl Scenario {
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self> {
        if !(spec.dt > 0.0) {
            return Err(Error::schema("dt", format!("must be positive, got {}", spec.dt)));
        }
        if spec.duration < 1 {
            return Err(Error::schema("duration", "must be >= 1"));
        }
        if !(spec.expert_progress > 0.0) {
            return Err(Error::schema("expert_progress", "must be positive"));
        }
        if spec.routes.is_empty() {
            return Err(Error::schema("routes", "at least one route is required"));
        }
        let mut routes = Vec::with_capacity(spec.routes.len());
        for (r, route) in spec.routes.iter().enumerate() {
            if spec.routes[..r].iter().any(|o| o.name == route.name) {
                return Err(Error::schema(
                    format!("routes[{r}].name"),
                    format!("duplicate route `{}`", route.name),
                ));
            }
            let poly = Polyline::new(route.waypoints.iter().map(|p| v2(*p)).collect())
                .and_then(|p| p.resample(ROUTE_SPACING))
                .map_err(|e| Error::schema(format!("routes[{r}].waypoints"), e.to_string()))?;
            routes.push(poly);
        }
        let find = |field: String, name: &str| {
            spec.routes
                .iter()
                .position(|r| r.name == name)
                .ok_or_else(|| Error::schema(field, format!("unknown route `{name}`")))
        };
        let ego_route = find("ego.route".into(), &spec.ego.route)?;
        let e = &spec.ego;
        check_state("ego", e.position, e.velocity, e.heading, e.half_size)?;
        let off = routes[ego_route].project(&v2(e.position)).distance;
        if off > planner::MAX_ROUTE_OFFSET {
            return Err(Error::schema(
                "ego.position",
                format!("{off:.2} m from route `{}`", e.route),
            ));
        }
        if !e.goal_s.is_finite() {
            return Err(Error::schema("ego.goal_s", "must be finite"));
        }
        let mut agent_routes = Vec::with_capacity(spec.agents.len());
        for (i, a) in spec.agents.iter().enumerate() {
            let field = format!("agents[{i}]");
            check_state(&field, a.position, a.velocity, a.heading, a.half_size)?;
            let r = find(format!("{field}.route"), &a.route)?;
            let off = routes[r].project(&v2(a.position)).distance;
            if off > MAX_AGENT_ROUTE_OFFSET {
                return Err(Error::schema(
                    format!("{field}.position"),
                    format!("{off:.2} m from route `{}` (limit {MAX_AGENT_ROUTE_OFFSET} m)", a.route),
                ));
            }
            IdmParams::resolve(a.idm.as_ref(), 1.0)
                .validate()
                .map_err(|e| Error::schema(format!("{field}.idm"), e.to_string()))?;
            agent_routes.push(r);
        }
        Ok(Self {
            spec,
            routes,
            ego_route,
            agent_routes,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.spec)?)
    }

    pub fn route(&self, index: usize) -> &Polyline {
        &self.routes[index]
    }

    pub fn ego_route(&self) -> &Polyline {
        &self.routes[self.ego_route]
    }

    pub fn agent_route(&self, agent: usize) -> &Polyline {
        &self.routes[self.agent_routes[agent]]
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    Scenario::from_json(&text).map_err(|e| match e {
        Error::Json(j) => Error::schema(path.display().to_string(), j.to_string()),
        other => other,
    })
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scenario.to_json()?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// `v0` (m/s); zero keeps the agent parked.
    pub desired_speed: f64,
    /// `T` (s).
    pub time_headway: f64,
    /// `s0` (m).
    pub min_gap: f64,
    /// `a` (m/s^2).
    pub max_accel: f64,
    /// `b` (m/s^2).
    pub comfort_decel: f64,
    /// `delta`.
    pub exponent: f64,
}

impl IdmParams {
    pub fn with_speed(desired_speed: f64) -> Self {
        Self {
            desired_speed,
            time_headway: 1.5,
            min_gap: 2.0,
            max_accel: 1.5,
            comfort_decel: 2.0,
            exponent: 4.0,
        }
    }

    fn resolve(o: Option<&IdmOverrides>, initial_speed: f64) -> Self {
        let d = Self::with_speed(initial_speed);
        let o = o.copied().unwrap_or_default();
        Self {
            desired_speed: o.desired_speed.unwrap_or(d.desired_speed),
            time_headway: o.time_headway.unwrap_or(d.time_headway),
            min_gap: o.min_gap.unwrap_or(d.min_gap),
            max_accel: o.max_accel.unwrap_or(d.max_accel),
            comfort_decel: o.comfort_decel.unwrap_or(d.comfort_decel),
            exponent: o.exponent.unwrap_or(d.exponent),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.time_headway,
            self.min_gap,
            self.max_accel,
            self.comfort_decel,
            self.exponent,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(self.desired_speed >= 0.0) {
            return Err(Error::domain(format!("IDM parameters must be positive: {self:?}")));
        }
        Ok(())
    }

    /// IDM acceleration, limited below by [`IDM_MAX_DECEL`].
    pub fn acceleration(&self, speed: f64, gap: Option<f64>, leader_speed: f64) -> f64 {
        let free = 1.0 - (speed / self.desired_speed).powf(self.exponent);
        let interaction = match gap {
            Some(gap) => {
                let dv = speed - leader_speed;
                let s_star = self.min_gap
                    + (speed * self.time_headway + speed * dv / (2.0 * (self.max_accel * self.comfort_decel).sqrt()))
                        .max(0.0);
                (s_star / gap.max(1e-3)).powi(2)
            }
            None => 0.0,
        };
        (self.max_accel * (free - interaction)).max(-IDM_MAX_DECEL)
    }
}

/// Longitudinal state of a route-following agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmAgent {
    /// Arc length along the route (m).
    pub s: f64,
    pub speed: f64,
}

/// Advances one step. Speed stays in `[0, max(speed, v0)]`, and a stopping
/// agent halts where its speed reaches zero.
pub fn step_idm(agent: IdmAgent, leader_gap: Option<f64>, leader_speed: f64, params: &IdmParams, dt: f64) -> IdmAgent {
    if params.desired_speed <= 0.0 && agent.speed <= 0.0 {
        return agent;
    }
    let a = if params.desired_speed <= 0.0 {
        -params.comfort_decel
    } else {
        params.acceleration(agent.speed, leader_gap, leader_speed)
    };
    let cap = agent.speed.max(params.desired_speed);
    let v = agent.speed + a * dt;
    if v <= 0.0 {
        // Stops within the step.
        let ds = if a < 0.0 {
            agent.speed * agent.speed / (-2.0 * a)
        } else {
            0.0
        };
        return IdmAgent {
            s: agent.s + ds,
            speed: 0.0,
        };
    }
    let v = v.min(cap);
    IdmAgent {
        s: agent.s + 0.5 * (agent.speed + v) * dt,
        speed: v,
    }
}

/// Axis-aligned rectangle overlap test (the planner's collision model).
pub fn detect_collision(ego: &AgentState, agent: &AgentState) -> bool {
    let r_long = ego.half_size[0] + agent.half_size[0];
    let r_lat = ego.half_size[1] + agent.half_size[1];
    let d = agent.position - ego.position;
    d.x.abs() <= r_long && d.y.abs() <= r_lat
}

/// Source of NEV forecasts.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictor {
    ConstantVelocity {
        sigma2: f64,
    },
    /// Recorded forecasts keyed by `(agent_id, step)`; missing entries fall
    /// back to the constant-velocity baseline.
    Playback(HashMap<(usize, usize), GmmPrediction>),
}

impl Default for Predictor {
    fn default() -> Self {
        Predictor::ConstantVelocity {
            sigma2: DEFAULT_CV_SIGMA2,
        }
    }
}

impl Predictor {
    pub fn playback(records: &[PredictionRecord]) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        for r in records {
            map.insert((r.agent_id, r.t), r.prediction()?);
        }
        Ok(Predictor::Playback(map))
    }

    pub fn predict(
        &self,
        agent_id: usize,
        step: usize,
        state: &AgentState,
        horizon: usize,
        dt: f64,
    ) -> Result<GmmPrediction> {
        match self {
            Predictor::ConstantVelocity { sigma2 } => constant_velocity_predict(state, horizon, dt, *sigma2),
            Predictor::Playback(map) => match map.get(&(agent_id, step)) {
                Some(p) if p.horizon() >= horizon => Ok(p.clone()),
                _ => constant_velocity_predict(state, horizon, dt, DEFAULT_CV_SIGMA2),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EgoSnapshot {
    pub position: Vec2,
    pub velocity: Vec2,
    /// Arc length along the ego route.
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSnapshot {
    pub id: usize,
    pub state: AgentState,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentForecast {
    pub agent: usize,
    pub modes: Vec<ModeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    /// Ego state before the control is applied.
    pub ego: EgoSnapshot,
    pub control: Vec2,
    /// Ego state after the step.
    pub ego_next: EgoSnapshot,
    pub status: SolveStatus,
    pub cost: f64,
    /// Smallest exact keep-out margin of the plan; `None` without constrained agents.
    pub min_margin: Option<f64>,
    pub max_violation: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Wall-clock planning time (s); 0 unless timing is enabled.
    pub solve_time: f64,
    /// Agent states before the step.
    pub agents: Vec<AgentSnapshot>,
    /// Agent states after the step.
    pub agents_next: Vec<AgentSnapshot>,
    /// Forecasts handed to the planner (already scaled).
    pub predictions: Vec<AgentForecast>,
    /// Planned positions of the most probable mode.
    pub plan: Vec<Vec2>,
    /// Agents overlapping the ego after the step.
    pub collisions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub scenario_id: String,
    pub alpha: f64,
    pub seed: u64,
    pub dt: f64,
    pub ego_half_size: [f64; 2],
    pub goal_reached: bool,
    pub records: Vec<StepRecord>,
}

impl RolloutLog {
    pub fn collided(&self) -> bool {
        self.records.iter().any(|r| !r.collisions.is_empty())
    }

    pub fn degraded_steps(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.status == SolveStatus::Degraded)
            .count()
    }

    /// One JSON object per line, one line per step.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub predictor: Predictor,
    /// Record wall-clock solve times (makes logs non-reproducible).
    pub timing: bool,
    /// Stop once the ego passes its goal arc length.
    pub stop_at_goal: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            predictor: Predictor::default(),
            timing: false,
            stop_at_goal: true,
        }
    }
}

struct LiveAgent {
    route: usize,
    half_size: [f64; 2],
    idm: IdmParams,
    long: IdmAgent,
}

impl LiveAgent {
    fn state(&self, routes: &[Polyline]) -> AgentState {
        let r = &routes[self.route];
        let t = r.tangent_at(self.long.s);
        AgentState {
            position: r.point_at(self.long.s),
            velocity: t * self.long.speed,
            heading: wrap_angle(t.y.atan2(t.x)),
            half_size: self.half_size,
        }
    }
}

/// Nearest vehicle ahead of `me` inside the leader corridor of its route.
fn find_leader(
    me: usize,
    agents: &[LiveAgent],
    states: &[AgentState],
    ego: &AgentState,
    routes: &[Polyline],
) -> Option<(f64, f64)> {
    let a = &agents[me];
    let route = &routes[a.route];
    let others = states
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != me)
        .map(|(_, s)| s)
        .chain(std::iter::once(ego));
    let mut best: Option<(f64, f64)> = None;
    for o in others {
        let p = route.project(&o.position);
        if p.lateral.abs() > LEADER_CORRIDOR || p.s <= a.long.s {
            continue;
        }
        // Skip vehicles projecting onto the clamped route end from beyond it.
        if p.s >= route.length() && (o.position - p.point).norm() > LEADER_CORRIDOR {
            continue;
        }
        let gap = p.s - a.long.s - a.half_size[0] - o.half_size[0];
        let speed = o.velocity.dot(&route.tangent_at(p.s));
        if best.map_or(true, |(g, _)| gap < g) {
            best = Some((gap, speed));
        }
    }
    best
}

/// Runs one closed-loop rollout. The simulation step equals `cfg.dt`; when it
/// differs from the scenario dt the duration is rescaled to the same time span.
pub fn run_closed_loop(
    scenario: &Scenario,
    cfg: &PlannerConfig,
    options: &SimOptions,
    alpha: f64,
    seed: u64,
) -> Result<RolloutLog> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::domain(format!("alpha must be positive, got {alpha}")));
    }
    cfg.validate()?;
    let spec = &scenario.spec;
    let dt = cfg.dt;
    let steps = ((spec.duration as f64 * spec.dt / dt) - 1e-9).ceil().max(1.0) as usize;
    let routes = &scenario.routes;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agents: Vec<LiveAgent> = spec
        .agents
        .iter()
        .zip(&scenario.agent_routes)
        .map(|(a, &r)| {
            let jitter = 1.0 + rng.random_range(-SPEED_JITTER..=SPEED_JITTER);
            let speed = v2(a.velocity).norm() * jitter;
            let mut idm = IdmParams::resolve(a.idm.as_ref(), speed);
            if a.idm.and_then(|o| o.desired_speed).is_some() {
                idm.desired_speed *= jitter;
            }
            LiveAgent {
                route: r,
                half_size: a.half_size,
                idm,
                long: IdmAgent {
                    s: routes[r].project(&v2(a.position)).s,
                    speed,
                },
            }
        })
        .collect();

    let ego_route = scenario.ego_route();
    let mut ego = EgoState {
        position: v2(spec.ego.position),
        velocity: v2(spec.ego.velocity),
        half_size: spec.ego.half_size,
    };
    let mut cfg = cfg.clone();
    if cfg.target_speed.is_none() {
        cfg.target_speed = Some(ego.velocity.norm());
    }

    let snapshot = |e: &EgoState| EgoSnapshot {
        position: e.position,
        velocity: e.velocity,
        s: ego_route.project(&e.position).s,
    };
    let agent_snaps = |agents: &[LiveAgent]| -> Vec<AgentSnapshot> {
        agents
            .iter()
            .enumerate()
            .map(|(id, a)| AgentSnapshot {
                id,
                state: a.state(routes),
                s: a.long.s,
            })
            .collect()
    };

    let mut records = Vec::with_capacity(steps);
    let mut warm: Option<WarmStart> = None;
    let mut goal_reached = false;
    for step in 0..steps {
        let before = snapshot(&ego);
        if options.stop_at_goal && before.s >= spec.ego.goal_s {
            goal_reached = true;
            break;
        }
        let snaps = agent_snaps(&agents);
        let states: Vec<AgentState> = snaps.iter().map(|a| a.state).collect();
        let preds = states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let raw = options.predictor.predict(i, step, s, cfg.horizon, dt)?;
                scale_covariances(&raw, alpha)
            })
            .collect::<Result<Vec<_>>>()?;
        let window = ego_route.window(before.s, ROUTE_SPACING, ROUTE_WINDOW_POINTS)?;

        let started = Instant::now();
        let result = planner::plan(&ego, &states, &preds, Some(&window), &cfg, warm.as_ref())?;
        let solve_time = if options.timing {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let probs: Vec<f64> = result.modes.iter().map(|m| m.prob).collect();
        warm = Some(result.warm_start.shifted(&probs));
        let best = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(0, |(j, _)| j);

        let u = result.first_control;
        let ego_state = AgentState {
            position: ego.position,
            velocity: ego.velocity,
            heading: 0.0,
            half_size: ego.half_size,
        };
        // Synchronous update: every agent reacts to the pre-step scene.
        let leaders: Vec<Option<(f64, f64)>> = (0..agents.len())
            .map(|i| find_leader(i, &agents, &states, &ego_state, routes))
            .collect();
        for (a, leader) in agents.iter_mut().zip(&leaders) {
            let (gap, vl) = match leader {
                Some((g, v)) => (Some(*g), *v),
                None => (None, 0.0),
            };
            a.long = step_idm(a.long, gap, vl, &a.idm, dt);
            a.long.s = a.long.s.min(routes[a.route].length());
        }
        ego.position += u * dt;
        ego.velocity = u;

        let after = snapshot(&ego);
        let snaps_next = agent_snaps(&agents);
        let ego_after = AgentState {
            position: ego.position,
            velocity: ego.velocity,
            heading: 0.0,
            half_size: ego.half_size,
        };
        let collisions = snaps_next
            .iter()
            .filter(|a| detect_collision(&ego_after, &a.state))
            .map(|a| a.id)
            .collect();
        let predictions = result
            .agents
            .iter()
            .map(|&i| AgentForecast {
                agent: i,
                modes: PredictionRecord::from_prediction(i, step, &preds[i], &[]).modes,
            })
            .collect();
        records.push(StepRecord {
            step,
            time: step as f64 * dt,
            ego: before,
            control: u,
            ego_next: after,
            status: result.status,
            cost: result.cost,
            min_margin: (!result.margins.is_empty()).then(|| result.min_margin()),
            max_violation: result.max_violation,
            outer_iterations: result.outer_iterations,
            inner_iterations: result.inner_iterations,
            solve_time,
            agents: snaps,
            agents_next: snaps_next,
            predictions,
            plan: result.modes[best].states.clone(),
            collisions,
        });
    }
    if let Some(last) = records.last() {
        goal_reached |= last.ego_next.s >= spec.ego.goal_s;
    }
    Ok(RolloutLog {
        scenario_id: spec.id.clone(),
        alpha,
        seed,
        dt,
        ego_half_size: spec.ego.half_size,
        goal_reached,
        records,
    })
}

/// Overlap-rectangle half extents used by [`detect_collision`].
pub fn collision_extents(ego_half: [f64; 2], agent_half: [f64; 2]) -> Result<[f64; 2]> {
    let r = overlap_rect(ego_half, agent_half)?;
    Ok([r.r_long, r.r_lat])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn state(x: f64, y: f64) -> AgentState {
        AgentState {
            position: Vec2::new(x, y),
            velocity: Vec2::zeros(),
            heading: 0.0,
            half_size: [2.5, 1.0],
        }
    }

    #[test]
    fn collision_cases() {
        assert!(detect_collision(&state(0.0, 0.0), &state(0.0, 0.0)));
        assert!(!detect_collision(&state(0.0, 0.0), &state(5.01, 0.0)));
        assert!(detect_collision(&state(0.0, 0.0), &state(5.0, 2.0)));
    }

    #[test]
    fn idm_equilibria() {
        let p = IdmParams::with_speed(10.0);
        assert_relative_eq!(p.acceleration(10.0, None, 0.0), 0.0);
        let rest = step_idm(IdmAgent { s: 0.0, speed: 0.0 }, Some(p.min_gap), 0.0, &p, 0.3);
        assert_eq!(rest, IdmAgent { s: 0.0, speed: 0.0 });
    }

    #[test]
    fn idm_free_road_monotone() {
        for v0 in [0.5, 3.0, 10.0, 30.0] {
            for dt in [0.1, 0.3, 0.8] {
                let p = IdmParams::with_speed(v0);
                let mut a = IdmAgent { s: 0.0, speed: 0.0 };
                for _ in 0..2000 {
                    let next = step_idm(a, None, 0.0, &p, dt);
                    assert!(next.speed >= a.speed - 1e-12);
                    assert!(next.speed <= v0 + 1e-6);
                    a = next;
                }
                assert_relative_eq!(a.speed, v0, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn hard_brake_is_limited() {
        let p = IdmParams::with_speed(10.0);
        assert_relative_eq!(p.acceleration(10.0, Some(0.1), 0.0), -IDM_MAX_DECEL);
    }
}
