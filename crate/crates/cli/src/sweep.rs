//! Covariance-scaling sweeps over scenarios, scales and seeds.

use std::fmt::Write;

use rayon::prelude::*;
use serde::Serialize;
use uasmpc::metrics::TTC_WINDOW;
use uasmpc::planner::PlannerConfig;
use uasmpc::prediction::mean_stderr;
use uasmpc::simulation::{run_closed_loop, Scenario, SimOptions};

use crate::report::MetricsRow;

pub const DEFAULT_ALPHAS: [f64; 8] = [0.25, 1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
pub const DEFAULT_SEEDS: [u64; 2] = [0, 1];

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub alphas: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub seeds: Vec<u64>,
    pub config: PlannerConfig,
    pub options: SimOptions,
    pub predictor_name: String,
}

impl SweepSpec {
    pub fn validate(&self) -> uasmpc::Result<()> {
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(uasmpc::Error::Domain(
                "alphas must be a nonempty list of positive numbers".into(),
            ));
        }
        if self.scenarios.is_empty() {
            return Err(uasmpc::Error::Domain("no scenarios matched".into()));
        }
        if self.seeds.is_empty() {
            return Err(uasmpc::Error::Domain("at least one seed is required".into()));
        }
        Ok(())
    }
}

/// Runs the full grid in parallel. Rows come back ordered by scenario, then
/// alpha, then seed; failures become rows with an error message.
pub fn run_sweep(spec: &SweepSpec) -> Vec<MetricsRow> {
    let grid: Vec<(usize, f64, u64)> = (0..spec.scenarios.len())
        .flat_map(|s| {
            spec.alphas
                .iter()
                .flat_map(move |&a| spec.seeds.iter().map(move |&seed| (s, a, seed)))
        })
        .collect();
    grid.par_iter()
        .map(|&(s, alpha, seed)| {
            let sc = &spec.scenarios[s];
            run_closed_loop(sc, &spec.config, &spec.options, alpha, seed)
                .and_then(|log| MetricsRow::from_log(&log, &spec.predictor_name, sc.spec.expert_progress))
                .unwrap_or_else(|e| MetricsRow::failed(&sc.spec.id, &spec.predictor_name, alpha, seed, e.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cell {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Cell {
    fn of(values: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(values);
        Self {
            mean,
            stderr,
            n: values.len(),
        }
    }
}

/// Per-alpha mean and standard error of each metric over successful runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub alphas: Vec<f64>,
    pub progress: Vec<Cell>,
    pub jerk: Vec<Cell>,
    /// Infinite TTC counts as the search window length.
    pub ttc: Vec<Cell>,
    pub score: Vec<Cell>,
}

pub fn aggregate(rows: &[MetricsRow], alphas: &[f64]) -> Aggregate {
    let column = |alpha: f64, f: &dyn Fn(&MetricsRow) -> Option<f64>| -> Cell {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.is_ok() && r.alpha == alpha)
            .filter_map(f)
            .collect();
        Cell::of(&vals)
    };
    Aggregate {
        alphas: alphas.to_vec(),
        progress: alphas.iter().map(|&a| column(a, &|r| r.progress)).collect(),
        jerk: alphas.iter().map(|&a| column(a, &|r| r.jerk)).collect(),
        ttc: alphas
            .iter()
            .map(|&a| column(a, &|r| r.min_ttc.map(|t| t.min(TTC_WINDOW))))
            .collect(),
        score: alphas.iter().map(|&a| column(a, &|r| r.score)).collect(),
    }
}

/// `1/k` for unit fractions, otherwise the shortest decimal.
pub fn alpha_label(alpha: f64) -> String {
    let inv = 1.0 / alpha;
    if alpha < 1.0 && (inv - inv.round()).abs() < 1e-9 {
        format!("1/{}", inv.round() as i64)
    } else {
        format!("{alpha}")
    }
}

impl Aggregate {
    fn rows(&self) -> [(&'static str, &[Cell]); 4] {
        [
            ("Progress", &self.progress),
            ("Jerk", &self.jerk),
            ("TTC", &self.ttc),
            ("CL Score", &self.score),
        ]
    }

    /// Metrics as rows, alphas as columns, cells `mean ± se`.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "| Metric |");
        for a in &self.alphas {
            let _ = write!(out, " α={} |", alpha_label(*a));
        }
        out.push('\n');
        out.push_str("|---|");
        for _ in &self.alphas {
            out.push_str("---|");
        }
        out.push('\n');
        for (name, cells) in self.rows() {
            let _ = write!(out, "| {name} |");
            for c in cells {
                let _ = write!(out, " {:.2} ± {:.2} |", c.mean, c.stderr);
            }
            out.push('\n');
        }
        out
    }

    /// Long form: one line per (metric, alpha).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,alpha,mean,stderr,n\n");
        for (name, cells) in self.rows() {
            for (a, c) in self.alphas.iter().zip(cells) {
                let _ = writeln!(out, "{name},{a},{},{},{}", c.mean, c.stderr, c.n);
            }
        }
        out
    }
}
