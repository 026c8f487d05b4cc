use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uasmpc::planner::HorizonPreset;
use uasmpc_cli::checks::{run_geometry_checks, CheckSizes};
use uasmpc_cli::sweep::{DEFAULT_ALPHAS, DEFAULT_SEEDS};
use uasmpc_cli::{pred_metrics, simulate, sweep, SimulateArgs, SweepArgs};

#[derive(Parser)]
#[command(
    name = "uasmpc",
    version,
    about = "Uncertainty-aware stochastic MPC: closed-loop runs, sweeps and metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PlannerFlags {
    /// JSON file with planner settings (PlannerConfig fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Horizon preset: short (10 x 0.3 s) or long (10 x 0.8 s).
    #[arg(long, value_parser = parse_horizon)]
    horizon: Option<HorizonPreset>,
    /// Per-step coverage level p in (0, 1).
    #[arg(long)]
    p_coverage: Option<f64>,
    /// Prediction dump to replay instead of the constant-velocity predictor.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Record wall-clock solve times (outputs are then not reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop rollout.
    Simulate {
        scenario: PathBuf,
        /// Covariance scale applied to every forecast.
        #[arg(long, default_value_t = 1.0, value_parser = parse_alpha)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Run the (alpha x scenario x seed) grid and aggregate per alpha.
    Sweep {
        /// Glob matching scenario files.
        #[arg(long, default_value = "scenarios/*.json")]
        scenarios: String,
        #[arg(long, value_delimiter = ',', value_parser = parse_alpha)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        planner: PlannerFlags,
    },
    /// Prediction metrics of a dump file, as CSV.
    PredMetrics {
        dump: PathBuf,
        /// Seed for the sampled minADE/minFDE.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Brute-force and Monte-Carlo checks of the keep-out geometry.
    CheckGeometry {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Smaller sample sizes.
        #[arg(long)]
        quick: bool,
    },
}

fn parse_alpha(s: &str) -> Result<f64, String> {
    let a: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if a > 0.0 && a.is_finite() {
        Ok(a)
    } else {
        Err(format!("alpha must be positive, got {s}"))
    }
}

fn parse_horizon(s: &str) -> Result<HorizonPreset, String> {
    s.parse().map_err(|e: uasmpc::Error| e.to_string())
}

fn run(cli: Cli) -> uasmpc::Result<bool> {
    match cli.command {
        Command::Simulate {
            scenario,
            alpha,
            seed,
            out,
            planner,
        } => {
            let res = simulate(&SimulateArgs {
                scenario,
                config: planner.config,
                alpha,
                seed,
                horizon: planner.horizon,
                p_coverage: planner.p_coverage,
                predictions: planner.predictions,
                timing: planner.timing,
                out,
            })?;
            let r = &res.row;
            if r.degraded_steps.unwrap_or(0) > 0 {
                eprintln!("warning: planner degraded on {} steps", r.degraded_steps.unwrap_or(0));
            }
            println!(
                "{}: progress {:.3}, jerk {:.3}, min TTC {:.2} s, collided {}, score {:.3}",
                r.id,
                r.progress.unwrap_or(f64::NAN),
                r.jerk.unwrap_or(f64::NAN),
                r.min_ttc.unwrap_or(f64::NAN),
                r.collided.unwrap_or(false),
                r.score.unwrap_or(f64::NAN)
            );
            for p in [&res.log_path, &res.csv_path, &res.svg_path] {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
        Command::Sweep {
            scenarios,
            alphas,
            seeds,
            out,
            planner,
        } => {
            let res = sweep(&SweepArgs {
                scenarios,
                alphas: if alphas.is_empty() {
                    DEFAULT_ALPHAS.to_vec()
                } else {
                    alphas
                },
                seeds: if seeds.is_empty() {
                    DEFAULT_SEEDS.to_vec()
                } else {
                    seeds
                },
                config: planner.config,
                horizon: planner.horizon,
                p_coverage: planner.p_coverage,
                predictions: planner.predictions,
                timing: planner.timing,
                out,
            })?;
            for r in res.rows.iter().filter(|r| !r.is_ok()) {
                eprintln!(
                    "warning: {} alpha {} seed {} failed: {}",
                    r.id, r.alpha, r.seed, r.error
                );
            }
            print!("{}", res.aggregate.to_table());
            for p in [&res.runs_path, &res.aggregate_path, &res.table_path] {
                println!("wrote {}", p.display());
            }
            Ok(true)
        }
        Command::PredMetrics { dump, seed } => {
            print!("{}", pred_metrics(&dump, seed)?);
            Ok(true)
        }
        Command::CheckGeometry { seed, quick } => {
            let sizes = if quick { CheckSizes::QUICK } else { CheckSizes::FULL };
            let reports = run_geometry_checks(sizes, seed)?;
            for r in &reports {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            Ok(reports.iter().all(|r| r.passed))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
