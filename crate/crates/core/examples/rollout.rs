//! Step-by-step trace of one closed-loop rollout.
//!
//! `cargo run --release --example rollout -- scenarios/crossing.json [alpha] [every]`

use std::process::ExitCode;

use uasmpc::metrics::evaluate;
use uasmpc::planner::PlannerConfig;
use uasmpc::simulation::{load_scenario, run_closed_loop, SimOptions};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(path) = args.first() else {
        eprintln!("usage: rollout <scenario.json> [alpha] [print every n steps]");
        return ExitCode::FAILURE;
    };
    let alpha: f64 = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(1.0);
    let every: usize = args.get(2).and_then(|a| a.parse().ok()).unwrap_or(5).max(1);

    let run = || -> uasmpc::Result<()> {
        let scenario = load_scenario(path)?;
        let opts = SimOptions {
            timing: true,
            ..SimOptions::default()
        };
        let log = run_closed_loop(&scenario, &PlannerConfig::default(), &opts, alpha, 0)?;
        for r in log.records.iter().step_by(every) {
            let agents: Vec<String> = r
                .agents
                .iter()
                .map(|a| {
                    format!(
                        "({:.1}, {:.1}) @ {:.1}",
                        a.state.position.x,
                        a.state.position.y,
                        a.state.velocity.norm()
                    )
                })
                .collect();
            println!(
                "t {:5.1}  ego ({:7.2}, {:5.2})  u ({:5.2}, {:5.2})  {:?}  margin {}  {:.3} s  {}",
                r.time,
                r.ego.position.x,
                r.ego.position.y,
                r.control.x,
                r.control.y,
                r.status,
                r.min_margin.map_or("-".into(), |m| format!("{m:.2}")),
                r.solve_time,
                agents.join(" ")
            );
        }
        let m = evaluate(&log, scenario.spec.expert_progress)?;
        println!(
            "progress {:.3}  jerk {:.3}  min TTC {:.2}  collided {}  score {:.3}  degraded steps {}",
            m.progress,
            m.avg_abs_jerk,
            m.min_ttc,
            m.collided,
            m.closed_loop_score,
            log.degraded_steps()
        );
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
