//! Per-run metric rows and CSV output.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uasmpc::metrics::{evaluate, PlanningMetrics};
use uasmpc::simulation::RolloutLog;
use uasmpc::Result;

/// One row per (scenario, predictor, alpha, seed). Metric cells are empty for failed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub predictor: String,
    pub alpha: f64,
    pub seed: u64,
    pub progress: Option<f64>,
    pub jerk: Option<f64>,
    pub min_ttc: Option<f64>,
    pub collided: Option<bool>,
    pub score: Option<f64>,
    pub solve_time_mean: Option<f64>,
    pub steps: Option<usize>,
    pub degraded_steps: Option<usize>,
    pub error: String,
}

impl MetricsRow {
    pub fn from_log(log: &RolloutLog, predictor: &str, expert_progress: f64) -> Result<Self> {
        let m: PlanningMetrics = evaluate(log, expert_progress)?;
        let n = log.records.len();
        let solve_time_mean = if n == 0 {
            0.0
        } else {
            log.records.iter().map(|r| r.solve_time).sum::<f64>() / n as f64
        };
        Ok(Self {
            id: log.scenario_id.clone(),
            predictor: predictor.to_string(),
            alpha: log.alpha,
            seed: log.seed,
            progress: Some(m.progress),
            jerk: Some(m.avg_abs_jerk),
            min_ttc: Some(m.min_ttc),
            collided: Some(m.collided),
            score: Some(m.closed_loop_score),
            solve_time_mean: Some(solve_time_mean),
            steps: Some(n),
            degraded_steps: Some(log.degraded_steps()),
            error: String::new(),
        })
    }

    pub fn failed(id: &str, predictor: &str, alpha: f64, seed: u64, error: String) -> Self {
        Self {
            id: id.to_string(),
            predictor: predictor.to_string(),
            alpha,
            seed,
            progress: None,
            jerk: None,
            min_ttc: None,
            collided: None,
            score: None,
            solve_time_mean: None,
            steps: None,
            degraded_steps: None,
            error,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_empty()
    }
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| csv_error(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: impl std::fmt::Display) -> uasmpc::Error {
    uasmpc::Error::Io(std::io::Error::other(e.to_string()))
}

/// Writes through a sibling temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
