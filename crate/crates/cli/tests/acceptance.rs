//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uasmpc::geometry::{Covariance2, Mat2, Vec2};
use uasmpc::planner::{
    build_reference, plan, EgoState, HorizonPreset, PlannerConfig, PlanningProblem, PolicyParameters,
};
use uasmpc::prediction::{
    avg_entropy, constant_velocity_predict, ece, gmm_nll, min_ade_fde, sample_trajectories, AgentState, Component,
    CoverageEstimator, GmmPrediction, Mode,
};
use uasmpc::route::Polyline;
use uasmpc::simulation::{load_scenario, run_closed_loop, SimOptions};
use uasmpc::solver::{check_gradients, NlpProblem};
use uasmpc_cli::checks::{run_geometry_checks, CheckSizes};
use uasmpc_cli::sweep::DEFAULT_ALPHAS;
use uasmpc_cli::{sweep, SweepArgs};

type Outcome = Result<String, String>;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn car(x: f64, y: f64, vx: f64, vy: f64) -> AgentState {
    AgentState {
        position: Vec2::new(x, y),
        velocity: Vec2::new(vx, vy),
        heading: vy.atan2(vx),
        half_size: [2.5, 1.0],
    }
}

fn random_cov(rng: &mut impl Rng) -> Covariance2 {
    let l1 = rng.random_range(0.05..3.0);
    let l2 = rng.random_range(0.05..3.0);
    let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
    let r = Mat2::new(c, -s, s, c);
    let m = r * Mat2::new(l1, 0.0, 0.0, l2) * r.transpose();
    Covariance2::new(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]).unwrap()
}

fn random_prediction(rng: &mut impl Rng, modes: usize, horizon: usize, spread: f64) -> GmmPrediction {
    let mut probs: Vec<f64> = (0..modes).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    let head: f64 = probs[..modes - 1].iter().sum();
    probs[modes - 1] = 1.0 - head;
    let modes = probs
        .into_iter()
        .map(|prob| Mode {
            prob,
            means: (0..horizon)
                .map(|_| Vec2::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread)))
                .collect(),
            covs: (0..horizon).map(|_| random_cov(rng)).collect(),
        })
        .collect();
    GmmPrediction::new(modes, horizon, 0.3).unwrap()
}

fn cv_entropy() -> Outcome {
    let pred = constant_velocity_predict(&car(0.0, 0.0, 10.0, 0.0), 10, 0.3, 0.02).map_err(|e| e.to_string())?;
    let h = avg_entropy(&pred);
    let detail = format!("avg entropy {h:.4}");
    if (h + 1.074).abs() <= 0.01 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn geometry(index: usize) -> Outcome {
    let reports = run_geometry_checks(CheckSizes::FULL, 0).map_err(|e| e.to_string())?;
    let r = &reports[index];
    if r.passed {
        Ok(r.detail.clone())
    } else {
        Err(r.detail.clone())
    }
}

fn tracking() -> Outcome {
    let cfg = PlannerConfig::default();
    let ego = EgoState {
        position: Vec2::zeros(),
        velocity: Vec2::new(8.0, 0.0),
        half_size: [2.5, 1.0],
    };
    let road = Polyline::new(vec![Vec2::new(-20.0, 0.0), Vec2::new(300.0, 0.0)]).unwrap();
    // A two-mode agent far off to the side keeps two plan branches without binding.
    let a = car(10.0, 30.0, 5.0, 0.0);
    let go = constant_velocity_predict(&a, cfg.horizon, cfg.dt, 0.02)
        .unwrap()
        .modes()[0]
        .clone();
    let stop = Mode {
        prob: 0.5,
        means: vec![a.position; cfg.horizon],
        covs: go.covs.clone(),
    };
    let pred = GmmPrediction::new(vec![Mode { prob: 0.5, ..go }, stop], cfg.horizon, cfg.dt).unwrap();
    let res = plan(&ego, &[a], &[pred], Some(&road), &cfg, None).map_err(|e| e.to_string())?;
    let same = res.modes.len() == 2
        && res.modes.iter().all(|m| {
            m.controls[0].x.to_bits() == res.first_control.x.to_bits()
                && m.controls[0].y.to_bits() == res.first_control.y.to_bits()
        });
    let detail = format!(
        "cost {:.2e}, max violation {:.2e}, {} modes share the first control: {same}",
        res.cost,
        res.max_violation,
        res.modes.len()
    );
    if res.cost < 1e-4 && res.max_violation < 1e-6 && same {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for (free, smooth) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = PlannerConfig {
            free_gains: free,
            smooth_collision: smooth,
            ..PlannerConfig::default()
        };
        let ego = EgoState {
            position: Vec2::zeros(),
            velocity: Vec2::new(6.0, 0.0),
            half_size: [2.5, 1.0],
        };
        let nevs = vec![car(15.0, -6.0, 0.0, 3.0), car(-5.0, 4.0, 2.0, 0.0)];
        let preds: Vec<GmmPrediction> = nevs
            .iter()
            .map(|a| {
                let go = constant_velocity_predict(a, cfg.horizon, cfg.dt, 0.1).unwrap().modes()[0].clone();
                let stop = Mode {
                    prob: 0.3,
                    means: vec![a.position; cfg.horizon],
                    covs: go.covs.clone(),
                };
                GmmPrediction::new(vec![Mode { prob: 0.7, ..go }, stop], cfg.horizon, cfg.dt).unwrap()
            })
            .collect();
        let road = Polyline::new(vec![Vec2::new(-20.0, 0.0), Vec2::new(300.0, 0.0)]).unwrap();
        let reference = build_reference(&road, &ego, &cfg).map_err(|e| e.to_string())?;
        let base = PolicyParameters::zeros(2, 2, cfg.horizon);
        let problem = PlanningProblem::new(&ego, &nevs, &preds, &reference, &base, &cfg).map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let x: Vec<f64> = (0..problem.dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rep = check_gradients(&problem, &x, 1e-6, 1e-4).map_err(|e| e.to_string())?;
            worst = worst.max(rep.max_rel_error);
        }
    }
    let detail = format!("20 random points, max relative error {worst:.2e}");
    if worst <= 1e-4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn closed_loop_safety() -> Outcome {
    let cfg = PlannerConfig {
        p_coverage: 0.9,
        ..PlannerConfig::with_preset(HorizonPreset::Short)
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for name in ["crossing", "lead_brake", "oncoming"] {
        let s = load_scenario(root().join("scenarios").join(format!("{name}.json"))).map_err(|e| e.to_string())?;
        let log = run_closed_loop(&s, &cfg, &SimOptions::default(), 1.0, 0).map_err(|e| e.to_string())?;
        let collisions: usize = log.records.iter().map(|r| r.collisions.len()).sum();
        let m = uasmpc::metrics::evaluate(&log, s.spec.expert_progress).map_err(|e| e.to_string())?;
        ok &= collisions == 0 && m.progress >= 0.5;
        parts.push(format!("{name}: {collisions} collisions, progress {:.3}", m.progress));
    }
    let detail = parts.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sweep_trend() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let res = sweep(&SweepArgs {
        scenarios: format!("{}/scenarios/*.json", root().display()),
        alphas: DEFAULT_ALPHAS.to_vec(),
        seeds: vec![0, 1],
        config: None,
        horizon: Some(HorizonPreset::Short),
        p_coverage: Some(0.9),
        predictions: None,
        timing: false,
        out: dir.path().to_path_buf(),
    })
    .map_err(|e| e.to_string())?;
    let failed = res.rows.iter().filter(|r| !r.is_ok()).count();
    let at = |a: f64| {
        let i = res.aggregate.alphas.iter().position(|x| *x == a).unwrap();
        res.aggregate.progress[i].mean
    };
    let (lo, hi) = (at(0.25), at(4.0));
    let table = std::fs::read_to_string(&res.table_path).map_err(|e| e.to_string())?;
    let header_ok = table.lines().next().is_some_and(|h| h.matches("α=").count() == 8);
    let rows_ok = ["| Progress |", "| Jerk |", "| TTC |", "| CL Score |"]
        .iter()
        .all(|r| table.contains(r));
    let detail = format!(
        "{} runs ({failed} failed), progress {lo:.3} at α=1/4 vs {hi:.3} at α=4, table complete: {}",
        res.rows.len(),
        header_ok && rows_ok
    );
    if failed == 0 && res.rows.len() == 48 && lo >= hi && header_ok && rows_ok {
        print!("{table}");
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn draw(rng: &mut impl Rng, comps: &[Component]) -> Vec2 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = comps[comps.len() - 1];
    for c in comps {
        acc += c.prob;
        if u < acc {
            pick = *c;
            break;
        }
    }
    let e = Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
    pick.mean + pick.cov.sqrt() * e
}

fn calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let records: Vec<(Vec2, Vec<Component>)> = (0..10_000)
        .map(|_| {
            let modes = rng.random_range(1..=3);
            let mix = random_prediction(&mut rng, modes, 1, 10.0).step_mixture(0);
            (draw(&mut rng, &mix), mix)
        })
        .collect();
    let inflated: Vec<(Vec2, Vec<Component>)> = records
        .iter()
        .map(|(x, mix)| {
            let mix = mix
                .iter()
                .map(|c| Component {
                    cov: c.cov.scaled(100.0).unwrap(),
                    ..*c
                })
                .collect();
            (*x, mix)
        })
        .collect();
    let est = CoverageEstimator::default();
    let base = ece(&records, est).map_err(|e| e.to_string())?;
    let wide = ece(&inflated, est).map_err(|e| e.to_string())?;
    let detail = format!("10000 records, ECE {base:.4}, inflated 100x {wide:.4}");
    if base < 0.05 && wide > base {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn nll_and_ade() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst_nll: f64 = 0.0;
    let mut ade_mismatch = 0;
    for i in 0..500 {
        let modes = rng.random_range(1..=3);
        let pred = random_prediction(&mut rng, modes, 8, 5.0);
        let truth: Vec<Vec2> = (0..8)
            .map(|_| Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        // Density written out from the explicit inverse, shifted before exponentiating.
        let want = truth
            .iter()
            .enumerate()
            .map(|(k, x)| {
                let terms: Vec<(f64, f64)> = pred
                    .modes()
                    .iter()
                    .map(|m| {
                        let cov = m.covs[k].matrix();
                        let d = x - m.means[k];
                        let e = -0.5 * d.dot(&(cov.try_inverse().unwrap() * d));
                        (m.prob / (2.0 * std::f64::consts::PI * cov.determinant().sqrt()), e)
                    })
                    .collect();
                let top = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
                -(terms.iter().map(|(w, e)| w * (e - top).exp()).sum::<f64>().ln() + top)
            })
            .sum::<f64>()
            / 8.0;
        let got = gmm_nll(&pred, &truth).map_err(|e| e.to_string())?;
        worst_nll = worst_nll.max((got - want).abs() / want.abs().max(1.0));

        let samples = sample_trajectories(&pred, 5, i).map_err(|e| e.to_string())?;
        let mut best = (f64::INFINITY, f64::INFINITY);
        for s in &samples {
            let ade = s
                .iter()
                .zip(&truth)
                .map(|(a, b)| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt())
                .sum::<f64>()
                / 8.0;
            let fde = ((s[7].x - truth[7].x).powi(2) + (s[7].y - truth[7].y).powi(2)).sqrt();
            best = (best.0.min(ade), best.1.min(fde));
        }
        if min_ade_fde(&samples, &truth).map_err(|e| e.to_string())? != best {
            ade_mismatch += 1;
        }
    }
    let detail = format!("500 predictions, max NLL error {worst_nll:.2e}, minADE5 mismatches {ade_mismatch}");
    if worst_nll <= 1e-9 && ade_mismatch == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Duration, Box<dyn Fn() -> Outcome>)> = vec![
        (
            "constant-velocity entropy",
            Duration::from_secs(1),
            Box::new(cv_entropy),
        ),
        (
            "exact distance oracle",
            Duration::from_secs(30),
            Box::new(|| geometry(0)),
        ),
        (
            "chance-constraint guarantee",
            Duration::from_secs(120),
            Box::new(|| geometry(1)),
        ),
        ("keep-out nesting", Duration::from_secs(30), Box::new(|| geometry(2))),
        ("planner tracking", Duration::from_secs(5), Box::new(tracking)),
        ("solver gradient check", Duration::from_secs(60), Box::new(gradients)),
        (
            "closed-loop safety",
            Duration::from_secs(180),
            Box::new(closed_loop_safety),
        ),
        (
            "sensitivity sweep trend",
            Duration::from_secs(1200),
            Box::new(sweep_trend),
        ),
        ("ECE self-consistency", Duration::from_secs(30), Box::new(calibration)),
        ("NLL and minADE oracles", Duration::from_secs(10), Box::new(nll_and_ade)),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let in_time = took <= *budget;
        let (passed, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !passed {
            failures += 1;
        }
        println!(
            "criterion {:>2} {}: {name}: {detail} [{:.2} s, budget {} s]",
            i + 1,
            if passed { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
