//! Command implementations behind the `uasmpc` binary.

pub mod checks;
pub mod report;
pub mod svg;
pub mod sweep;

use std::path::{Path, PathBuf};

use uasmpc::planner::{HorizonPreset, PlannerConfig};
use uasmpc::prediction::{summarize_records, PredictionRecord};
use uasmpc::simulation::{load_scenario, run_closed_loop, Predictor, Scenario, SimOptions};
use uasmpc::{Error, Result};

use report::{rows_to_csv, write_atomic, MetricsRow};
use sweep::{aggregate, run_sweep, Aggregate, SweepSpec};

/// Planner settings from an optional JSON file, with flag overrides applied on top.
pub fn planner_config(
    path: Option<&Path>,
    horizon: Option<HorizonPreset>,
    p_coverage: Option<f64>,
) -> Result<PlannerConfig> {
    let mut cfg = match path {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => PlannerConfig::default(),
    };
    if let Some(h) = horizon {
        (cfg.horizon, cfg.dt) = h.steps_dt();
    }
    if let Some(p) = p_coverage {
        cfg.p_coverage = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_dump(path: &Path) -> Result<Vec<PredictionRecord>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

fn predictor(dump: Option<&Path>) -> Result<(Predictor, &'static str)> {
    match dump {
        Some(p) => Ok((Predictor::playback(&load_dump(p)?)?, "playback")),
        None => Ok((Predictor::default(), "cv")),
    }
}

#[derive(Debug, Clone)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    pub config: Option<PathBuf>,
    pub alpha: f64,
    pub seed: u64,
    pub horizon: Option<HorizonPreset>,
    pub p_coverage: Option<f64>,
    pub predictions: Option<PathBuf>,
    pub timing: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub row: MetricsRow,
    pub log_path: PathBuf,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

pub fn simulate(args: &SimulateArgs) -> Result<SimulateOutput> {
    let cfg = planner_config(args.config.as_deref(), args.horizon, args.p_coverage)?;
    let scenario = load_scenario(&args.scenario)?;
    let (predictor, name) = predictor(args.predictions.as_deref())?;
    let options = SimOptions {
        predictor,
        timing: args.timing,
        ..SimOptions::default()
    };
    let log = run_closed_loop(&scenario, &cfg, &options, args.alpha, args.seed)?;
    let row = MetricsRow::from_log(&log, name, scenario.spec.expert_progress)?;

    std::fs::create_dir_all(&args.out)?;
    let stem = format!("{}_a{}_s{}", scenario.spec.id, args.alpha, args.seed);
    let log_path = args.out.join(format!("{stem}.jsonl"));
    let csv_path = args.out.join(format!("{stem}.csv"));
    let svg_path = args.out.join(format!("{stem}.svg"));
    write_atomic(&log_path, log.to_json_lines()?.as_bytes())?;
    write_atomic(&csv_path, rows_to_csv(std::slice::from_ref(&row))?.as_bytes())?;
    let radius = cfg.coverage()?.radius();
    write_atomic(&svg_path, svg::render(&scenario, &log, radius).as_bytes())?;
    Ok(SimulateOutput {
        row,
        log_path,
        csv_path,
        svg_path,
    })
}

#[derive(Debug, Clone)]
pub struct SweepArgs {
    pub scenarios: String,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub config: Option<PathBuf>,
    pub horizon: Option<HorizonPreset>,
    pub p_coverage: Option<f64>,
    pub predictions: Option<PathBuf>,
    pub timing: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<MetricsRow>,
    pub aggregate: Aggregate,
    pub runs_path: PathBuf,
    pub aggregate_path: PathBuf,
    pub table_path: PathBuf,
}

/// Scenario files matching a glob pattern, sorted by path.
pub fn expand_scenarios(pattern: &str) -> Result<Vec<Scenario>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Domain(format!("bad scenario pattern: {e}")))?;
    let mut paths: Vec<PathBuf> = paths
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Io(e.into()))?;
    paths.sort();
    paths.iter().map(load_scenario).collect()
}

pub fn sweep(args: &SweepArgs) -> Result<SweepOutput> {
    let config = planner_config(args.config.as_deref(), args.horizon, args.p_coverage)?;
    let (predictor, name) = predictor(args.predictions.as_deref())?;
    let spec = SweepSpec {
        alphas: args.alphas.clone(),
        scenarios: expand_scenarios(&args.scenarios)?,
        seeds: args.seeds.clone(),
        config,
        options: SimOptions {
            predictor,
            timing: args.timing,
            ..SimOptions::default()
        },
        predictor_name: name.to_string(),
    };
    spec.validate()?;
    let rows = run_sweep(&spec);
    let agg = aggregate(&rows, &spec.alphas);

    std::fs::create_dir_all(&args.out)?;
    let runs_path = args.out.join("sweep_runs.csv");
    let aggregate_path = args.out.join("sweep_aggregate.csv");
    let table_path = args.out.join("sweep_table.md");
    write_atomic(&runs_path, rows_to_csv(&rows)?.as_bytes())?;
    write_atomic(&aggregate_path, agg.to_csv().as_bytes())?;
    write_atomic(&table_path, agg.to_table().as_bytes())?;
    Ok(SweepOutput {
        rows,
        aggregate: agg,
        runs_path,
        aggregate_path,
        table_path,
    })
}

/// Prediction metrics of a dump as `metric,mean,stderr` CSV.
pub fn pred_metrics(dump: &Path, seed: u64) -> Result<String> {
    let records = load_dump(dump)?;
    let s = summarize_records(&records, seed)?;
    let mut out = String::from("metric,mean,stderr\n");
    for (name, (m, se)) in [
        ("min_ade_5", s.min_ade),
        ("min_fde_5", s.min_fde),
        ("nll", s.nll),
        ("entropy", s.entropy),
    ] {
        out.push_str(&format!("{name},{m},{se}\n"));
    }
    out.push_str(&format!("ece,{},\n", s.ece));
    out.push_str(&format!("records,{},\n", s.records));
    Ok(out)
}
