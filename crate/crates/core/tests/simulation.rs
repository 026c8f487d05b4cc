use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uasmpc::geometry::Vec2;
use uasmpc::planner::PlannerConfig;
use uasmpc::prediction::AgentState;
use uasmpc::simulation::{
    detect_collision, load_scenario, run_closed_loop, save_scenario, step_idm, IdmAgent, IdmParams, Scenario,
    SimOptions,
};

fn bundled(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"));
    load_scenario(path).unwrap()
}

const EMPTY_ROAD: &str = r#"{
  "id": "empty",
  "dt": 0.3,
  "duration": 40,
  "expert_progress": 100.0,
  "routes": [{"name": "main", "waypoints": [[0.0, 0.0], [300.0, 0.0]]}],
  "ego": {"position": [0.0, 0.0], "velocity": [10.0, 0.0], "heading": 0.0,
          "half_size": [2.5, 1.0], "route": "main", "goal_s": 60.0}
}"#;

#[test]
fn minimal_scenario_loads() {
    let s = Scenario::from_json(EMPTY_ROAD).unwrap();
    assert_eq!(s.spec.routes.len(), 1);
    assert!(s.spec.agents.is_empty());
    assert!((s.ego_route().length() - 300.0).abs() < 1e-9);
}

#[test]
fn schema_errors_name_the_field() {
    let off = EMPTY_ROAD.replace(
        r#""goal_s": 60.0}"#,
        r#""goal_s": 60.0},
  "agents": [{"position": [50.0, 10.0], "velocity": [5.0, 0.0], "heading": 0.0,
              "half_size": [2.5, 1.0], "route": "main"}]"#,
    );
    let err = Scenario::from_json(&off).unwrap_err().to_string();
    assert!(err.contains("agents[0].position"), "{err}");

    let unknown = EMPTY_ROAD.replace(r#""dt": 0.3"#, r#""dt": 0.3, "speed_limit": 3"#);
    let err = Scenario::from_json(&unknown).unwrap_err().to_string();
    assert!(err.contains("speed_limit"), "{err}");

    let bad_route = EMPTY_ROAD.replace(r#""route": "main""#, r#""route": "side""#);
    let err = Scenario::from_json(&bad_route).unwrap_err().to_string();
    assert!(err.contains("ego.route"), "{err}");
}

#[test]
fn scenario_round_trip() {
    let s = bundled("oncoming");
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("copy.json");
    save_scenario(&s, &path).unwrap();
    let back = load_scenario(&path).unwrap();
    assert_eq!(back.spec, s.spec);
}

#[test]
fn idm_equilibria() {
    let p = IdmParams::with_speed(10.0);
    let cruise = step_idm(IdmAgent { s: 0.0, speed: 10.0 }, None, 0.0, &p, 0.3);
    assert!((cruise.speed - 10.0).abs() < 1e-12);
    assert!((cruise.s - 3.0).abs() < 1e-12);
    let queued = step_idm(IdmAgent { s: 5.0, speed: 0.0 }, Some(p.min_gap), 0.0, &p, 0.3);
    assert_eq!(queued, IdmAgent { s: 5.0, speed: 0.0 });
}

#[test]
fn free_road_speed_rises_to_desired() {
    let p = IdmParams::with_speed(12.0);
    let mut a = IdmAgent { s: 0.0, speed: 0.0 };
    for _ in 0..2000 {
        let next = step_idm(a, None, 0.0, &p, 0.3);
        assert!(next.speed >= a.speed);
        assert!(next.speed <= 12.0 + 1e-6);
        a = next;
    }
    assert!((a.speed - 12.0).abs() < 1e-3);
}

fn interval_overlap(c1: f64, h1: f64, c2: f64, h2: f64) -> bool {
    c1 - h1 <= c2 + h2 && c2 - h2 <= c1 + h1
}

#[test]
fn collision_matches_interval_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = |rng: &mut ChaCha8Rng| AgentState {
        position: Vec2::new(rng.random_range(-8.0..8.0), rng.random_range(-4.0..4.0)),
        velocity: Vec2::zeros(),
        heading: 0.0,
        half_size: [rng.random_range(0.5..3.0), rng.random_range(0.3..1.5)],
    };
    for _ in 0..10_000 {
        let (e, a) = (state(&mut rng), state(&mut rng));
        let want = interval_overlap(e.position.x, e.half_size[0], a.position.x, a.half_size[0])
            && interval_overlap(e.position.y, e.half_size[1], a.position.y, a.half_size[1]);
        assert_eq!(detect_collision(&e, &a), want);
        assert_eq!(detect_collision(&a, &e), want);
    }
}

#[test]
fn empty_road_reaches_goal() {
    let s = Scenario::from_json(EMPTY_ROAD).unwrap();
    let log = run_closed_loop(&s, &PlannerConfig::default(), &SimOptions::default(), 1.0, 0).unwrap();
    assert!(log.goal_reached);
    assert!(!log.collided());
    assert_eq!(log.degraded_steps(), 0);
}

#[test]
fn closed_loop_integrates_applied_controls() {
    let s = bundled("lead_brake");
    let cfg = PlannerConfig::default();
    let log = run_closed_loop(&s, &cfg, &SimOptions::default(), 1.0, 3).unwrap();
    for (k, r) in log.records.iter().enumerate() {
        assert_eq!(r.step, k);
        let next = r.ego.position + r.control * cfg.dt;
        assert!((r.ego_next.position - next).norm() < 1e-12);
        assert_eq!(r.ego_next.velocity, r.control);
        if k > 0 {
            // Never reset: each step starts where the previous one ended.
            assert_eq!(r.ego.position, log.records[k - 1].ego_next.position);
            assert!(r.time > log.records[k - 1].time);
        }
        for a in &r.agents_next {
            assert!(s.agent_route(a.id).project(&a.state.position).distance < 1e-9);
        }
    }
}

#[test]
fn recorded_forecasts_are_scaled_by_alpha() {
    let s = bundled("lead_brake");
    let mut cfg = PlannerConfig::default();
    cfg.solver.max_outer = 20;
    let mut s_short = s.clone();
    s_short.spec.duration = 3;
    let s_short = Scenario::from_spec(s_short.spec).unwrap();
    for alpha in [0.25, 1.0, 4.0] {
        let log = run_closed_loop(&s_short, &cfg, &SimOptions::default(), alpha, 0).unwrap();
        let f = &log.records[0].predictions[0];
        for c in &f.modes[0].covs {
            assert!((c[0] - 0.02 * alpha).abs() < 1e-15);
            assert_eq!(c[1], 0.0);
            assert!((c[2] - 0.02 * alpha).abs() < 1e-15);
        }
    }
}

#[test]
fn crossing_has_no_collisions_and_is_deterministic() {
    let s = bundled("crossing");
    let cfg = PlannerConfig::default();
    let a = run_closed_loop(&s, &cfg, &SimOptions::default(), 1.0, 0).unwrap();
    assert!(!a.collided());
    let b = run_closed_loop(&s, &cfg, &SimOptions::default(), 1.0, 0).unwrap();
    assert_eq!(a.to_json_lines().unwrap(), b.to_json_lines().unwrap());
}

#[test]
fn rejects_non_positive_alpha() {
    let s = Scenario::from_json(EMPTY_ROAD).unwrap();
    assert!(run_closed_loop(&s, &PlannerConfig::default(), &SimOptions::default(), 0.0, 0).is_err());
}

proptest! {
    #[test]
    fn idm_speed_stays_in_range(v in 0.0f64..20.0, v0 in 0.0f64..20.0, gap in proptest::option::of(0.0f64..80.0), vl in 0.0f64..20.0) {
        let p = IdmParams::with_speed(v0);
        let next = step_idm(IdmAgent { s: 0.0, speed: v }, gap, vl, &p, 0.3);
        prop_assert!(next.speed >= 0.0);
        prop_assert!(next.speed <= v.max(v0) + 1e-12);
        prop_assert!(next.s >= 0.0);
    }
}
