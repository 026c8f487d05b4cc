//! Closed-loop planning metrics and the aggregate run score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::prediction::AgentState;
use crate::simulation::{detect_collision, RolloutLog};

/// Look-ahead window (s) of the time-to-collision search.
pub const TTC_WINDOW: f64 = 10.0;
/// Substeps per simulation step in the time-to-collision search.
pub const TTC_SUBSTEPS: usize = 10;
/// TTC at or above this (s) earns the full safety component.
pub const TTC_SATURATION: f64 = 3.0;
/// Jerk (m/s^3) up to which the comfort component is full.
pub const JERK_COMFORT: f64 = 1.0;

pub const PROGRESS_WEIGHT: f64 = 0.5;
pub const TTC_WEIGHT: f64 = 0.3;
pub const COMFORT_WEIGHT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanningMetrics {
    pub progress: f64,
    pub avg_abs_jerk: f64,
    /// Seconds; `f64::INFINITY` when no overlap occurs within the window.
    pub min_ttc: f64,
    pub collided: bool,
    pub closed_loop_score: f64,
}

/// Distance travelled along the ego route relative to the expert's.
pub fn ego_progress(log: &RolloutLog, expert_progress: f64) -> Result<f64> {
    if !(expert_progress > 0.0) {
        return Err(Error::domain(format!(
            "expert progress must be positive, got {expert_progress}"
        )));
    }
    let (Some(first), Some(last)) = (log.records.first(), log.records.last()) else {
        return Ok(0.0);
    };
    Ok(((last.ego_next.s - first.ego.s) / expert_progress).max(0.0))
}

/// Mean jerk magnitude of a velocity sequence sampled every `dt`.
pub fn avg_jerk_from_velocities(velocities: &[Vec2], dt: f64) -> Result<f64> {
    if velocities.len() < 4 {
        return Err(Error::domain(format!(
            "jerk needs at least 4 velocity samples, got {}",
            velocities.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    let accel: Vec<Vec2> = velocities.windows(2).map(|w| (w[1] - w[0]) / dt).collect();
    let jerks: Vec<f64> = accel.windows(2).map(|w| ((w[1] - w[0]) / dt).norm()).collect();
    Ok(jerks.iter().sum::<f64>() / jerks.len() as f64)
}

/// Mean jerk of the applied controls.
pub fn avg_jerk(log: &RolloutLog, dt: f64) -> Result<f64> {
    let u: Vec<Vec2> = log.records.iter().map(|r| r.control).collect();
    avg_jerk_from_velocities(&u, dt)
}

/// First time both rectangles overlap when propagated at frozen velocities,
/// searched in steps of `dt / TTC_SUBSTEPS` up to [`TTC_WINDOW`].
pub fn time_to_collision(ego: &AgentState, agent: &AgentState, dt: f64) -> f64 {
    let h = dt / TTC_SUBSTEPS as f64;
    let count = (TTC_WINDOW / h + 1e-9).floor() as usize;
    for m in 0..=count {
        let t = m as f64 * h;
        let e = AgentState {
            position: ego.position + ego.velocity * t,
            ..*ego
        };
        let a = AgentState {
            position: agent.position + agent.velocity * t,
            ..*agent
        };
        if detect_collision(&e, &a) {
            return t;
        }
    }
    f64::INFINITY
}

/// Smallest time to collision over every step and agent, including the
/// state after the final step.
pub fn min_ttc(log: &RolloutLog) -> f64 {
    let ego_state = |position: Vec2, velocity: Vec2| AgentState {
        position,
        velocity,
        heading: 0.0,
        half_size: log.ego_half_size,
    };
    let mut best = f64::INFINITY;
    for r in &log.records {
        let e = ego_state(r.ego.position, r.ego.velocity);
        for a in &r.agents {
            best = best.min(time_to_collision(&e, &a.state, log.dt));
        }
    }
    if let Some(r) = log.records.last() {
        let e = ego_state(r.ego_next.position, r.ego_next.velocity);
        for a in &r.agents_next {
            best = best.min(time_to_collision(&e, &a.state, log.dt));
        }
    }
    best
}

pub fn closed_loop_score(progress: f64, min_ttc: f64, avg_abs_jerk: f64, collided: bool) -> f64 {
    if collided {
        return 0.0;
    }
    let comfort = if avg_abs_jerk <= JERK_COMFORT {
        1.0
    } else {
        JERK_COMFORT / avg_abs_jerk
    };
    let score = PROGRESS_WEIGHT * progress.clamp(0.0, 1.0)
        + TTC_WEIGHT * (min_ttc / TTC_SATURATION).clamp(0.0, 1.0)
        + COMFORT_WEIGHT * comfort;
    score.clamp(0.0, 1.0)
}

/// All metrics for one rollout. Runs too short for a jerk estimate get jerk 0.
pub fn evaluate(log: &RolloutLog, expert_progress: f64) -> Result<PlanningMetrics> {
    let progress = ego_progress(log, expert_progress)?;
    let avg_abs_jerk = if log.records.len() >= 4 {
        avg_jerk(log, log.dt)?
    } else {
        0.0
    };
    let min_ttc = min_ttc(log);
    let collided = log.collided();
    Ok(PlanningMetrics {
        progress,
        avg_abs_jerk,
        min_ttc,
        collided,
        closed_loop_score: closed_loop_score(progress, min_ttc, avg_abs_jerk, collided),
    })
}
