//! Multi-modal Gaussian mixture forecasts, the constant-velocity baseline and
//! the prediction metric suite (minADE/minFDE, NLL, entropy, ECE).

use std::f64::consts::{E, PI};

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{chi2_cdf_2dof, Covariance2, Mat2, Vec2};

/// Default isotropic variance (m^2) of the constant-velocity baseline.
pub const DEFAULT_CV_SIGMA2: f64 = 0.02;

/// Tolerance on the sum of mode probabilities.
const PROB_SUM_TOL: f64 = 1e-9;

/// Instantaneous agent state in the planning frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub heading: f64,
    /// `[longitudinal, lateral]` half extents (m).
    pub half_size: [f64; 2],
}

impl AgentState {
    pub fn validate(&self) -> Result<()> {
        if !(self.half_size[0] > 0.0 && self.half_size[1] > 0.0) {
            return Err(Error::domain(format!(
                "half_size must be positive, got {:?}",
                self.half_size
            )));
        }
        if !(self.heading > -PI && self.heading <= PI) {
            return Err(Error::domain(format!(
                "heading must lie in (-pi, pi], got {}",
                self.heading
            )));
        }
        if self.position.iter().chain(self.velocity.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("agent state has non-finite entries"));
        }
        Ok(())
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub prob: f64,
    pub means: Vec<Vec2>,
    pub covs: Vec<Covariance2>,
}

/// Per-agent forecast: mode probabilities plus per-step Gaussian marginals.
/// Step `k` (0-based) of a mode is the forecast `k + 1` steps ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmPrediction {
    modes: Vec<Mode>,
    horizon: usize,
    dt: f64,
}

/// One component of a single-step mixture.
#[derive(Debug, Clone, Copy)]
pub struct Component {
    pub prob: f64,
    pub mean: Vec2,
    pub cov: Covariance2,
}

impl GmmPrediction {
    pub fn new(modes: Vec<Mode>, horizon: usize, dt: f64) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::domain("prediction needs at least one mode"));
        }
        if horizon == 0 {
            return Err(Error::domain("prediction horizon must be >= 1"));
        }
        if !(dt > 0.0) {
            return Err(Error::domain(format!("dt must be positive, got {dt}")));
        }
        let mut total = 0.0;
        for (j, m) in modes.iter().enumerate() {
            if !(0.0..=1.0).contains(&m.prob) {
                return Err(Error::domain(format!("mode {j} probability {} outside [0, 1]", m.prob)));
            }
            if m.means.len() != horizon || m.covs.len() != horizon {
                return Err(Error::domain(format!(
                    "mode {j} has {} means and {} covariances, expected {horizon}",
                    m.means.len(),
                    m.covs.len()
                )));
            }
            if m.means.iter().any(|v| !v.x.is_finite() || !v.y.is_finite()) {
                return Err(Error::domain(format!("mode {j} has non-finite means")));
            }
            total += m.prob;
        }
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::domain(format!("mode probabilities sum to {total}, expected 1")));
        }
        Ok(Self { modes, horizon, dt })
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.prob).collect()
    }

    pub fn step_mixture(&self, k: usize) -> Vec<Component> {
        self.modes
            .iter()
            .map(|m| Component {
                prob: m.prob,
                mean: m.means[k],
                cov: m.covs[k],
            })
            .collect()
    }

    /// Mode means ordered by decreasing probability, truncated to `n`.
    pub fn mode_mean_trajectories(&self, n: usize) -> Vec<Vec<Vec2>> {
        let mut idx: Vec<usize> = (0..self.modes.len()).collect();
        idx.sort_by(|&a, &b| self.modes[b].prob.total_cmp(&self.modes[a].prob));
        idx.into_iter().take(n).map(|j| self.modes[j].means.clone()).collect()
    }
}

/// Linear extrapolation of the current velocity with a fixed isotropic covariance.
pub fn constant_velocity_predict(state: &AgentState, steps: usize, dt: f64, sigma2: f64) -> Result<GmmPrediction> {
    if steps == 0 {
        return Err(Error::domain("steps must be >= 1"));
    }
    if !(dt > 0.0) || !(sigma2 > 0.0) {
        return Err(Error::domain(format!(
            "dt and sigma2 must be positive, got {dt}, {sigma2}"
        )));
    }
    let cov = Covariance2::isotropic(sigma2)?;
    let means = (1..=steps)
        .map(|k| state.position + state.velocity * (k as f64 * dt))
        .collect();
    GmmPrediction::new(
        vec![Mode {
            prob: 1.0,
            means,
            covs: vec![cov; steps],
        }],
        steps,
        dt,
    )
}

/// `Sigma -> alpha Sigma` for every component; means and probabilities unchanged.
pub fn scale_covariances(pred: &GmmPrediction, alpha: f64) -> Result<GmmPrediction> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::domain(format!("alpha must be > 0, got {alpha}")));
    }
    let modes = pred
        .modes
        .iter()
        .map(|m| {
            Ok(Mode {
                prob: m.prob,
                means: m.means.clone(),
                covs: m.covs.iter().map(|c| c.scaled(alpha)).collect::<Result<_>>()?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GmmPrediction {
        modes,
        horizon: pred.horizon,
        dt: pred.dt,
    })
}

/// Log density of a bivariate normal.
pub fn gaussian_log_pdf(x: &Vec2, mean: &Vec2, cov: &Covariance2) -> f64 {
    let d = x - mean;
    -(2.0 * PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * cov.mahalanobis_sq(&d)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Log density of a single-step mixture.
pub fn mixture_log_pdf(x: &Vec2, mixture: &[Component]) -> f64 {
    log_sum_exp(
        mixture
            .iter()
            .filter(|c| c.prob > 0.0)
            .map(|c| c.prob.ln() + gaussian_log_pdf(x, &c.mean, &c.cov)),
    )
}

/// Mean over steps of the negative log mixture density of the ground truth.
pub fn gmm_nll(pred: &GmmPrediction, truth: &[Vec2]) -> Result<f64> {
    if truth.len() != pred.horizon {
        return Err(Error::domain(format!(
            "truth has {} points, prediction horizon is {}",
            truth.len(),
            pred.horizon
        )));
    }
    let total: f64 = truth
        .iter()
        .enumerate()
        .map(|(k, x)| -mixture_log_pdf(x, &pred.step_mixture(k)))
        .sum();
    Ok(total / truth.len() as f64)
}

/// Differential entropy of a bivariate normal, `ln(2 pi e) + ln det(Sigma) / 2`.
pub fn gaussian_entropy(cov: &Covariance2) -> f64 {
    (2.0 * PI * E).ln() + 0.5 * cov.determinant().ln()
}

/// Component entropy averaged over modes and steps.
pub fn avg_entropy(pred: &GmmPrediction) -> f64 {
    let (sum, n) = pred
        .modes
        .iter()
        .flat_map(|m| m.covs.iter())
        .fold((0.0, 0usize), |(s, n), c| (s + gaussian_entropy(c), n + 1));
    sum / n as f64
}

fn sample_step(rng: &mut ChaCha8Rng, mean: &Vec2, cov: &Covariance2) -> Vec2 {
    let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
    mean + cov.sqrt() * eps
}

/// Draws `n` trajectories: a mode from the mode probabilities, then each step
/// independently from its Gaussian.
pub fn sample_trajectories(pred: &GmmPrediction, n: usize, seed: u64) -> Result<Vec<Vec<Vec2>>> {
    if n == 0 {
        return Err(Error::domain("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(pred.modes.iter().map(|m| m.prob))
        .map_err(|e| Error::numeric(format!("invalid mode weights: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let mode = &pred.modes[picker.sample(&mut rng)];
            mode.means
                .iter()
                .zip(&mode.covs)
                .map(|(m, c)| sample_step(&mut rng, m, c))
                .collect()
        })
        .collect())
}

/// Best-of-K average and final displacement errors, each minimized separately.
pub fn min_ade_fde(samples: &[Vec<Vec2>], truth: &[Vec2]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::domain("need at least one sample"));
    }
    if truth.is_empty() {
        return Err(Error::domain("truth trajectory is empty"));
    }
    let mut best = (f64::INFINITY, f64::INFINITY);
    for (i, s) in samples.iter().enumerate() {
        if s.len() != truth.len() {
            return Err(Error::domain(format!(
                "sample {i} has {} points, truth has {}",
                s.len(),
                truth.len()
            )));
        }
        let ade = s.iter().zip(truth).map(|(a, b)| (a - b).norm()).sum::<f64>() / truth.len() as f64;
        let fde = (s[s.len() - 1] - truth[truth.len() - 1]).norm();
        best.0 = best.0.min(ade);
        best.1 = best.1.min(fde);
    }
    Ok(best)
}

/// How a (truth, mixture) pair is mapped to a coverage level in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverageEstimator {
    /// Probability mass of the mixture's highest-density region that just
    /// reaches the truth. Closed form `F_chi2(d^2)` for a single component,
    /// seeded Monte-Carlo with `samples` draws otherwise.
    HighestDensity { samples: usize, seed: u64 },
    /// `sum_j p_j F_chi2(d_j^2)`.
    MixtureChi2,
}

impl Default for CoverageEstimator {
    fn default() -> Self {
        CoverageEstimator::HighestDensity { samples: 4096, seed: 0 }
    }
}

/// Number of calibration levels the ECE averages over.
pub const ECE_LEVELS: usize = 100;

pub fn coverage_score(truth: &Vec2, mixture: &[Component], estimator: CoverageEstimator, record: u64) -> f64 {
    let active: Vec<&Component> = mixture.iter().filter(|c| c.prob > 0.0).collect();
    match estimator {
        CoverageEstimator::MixtureChi2 => active
            .iter()
            .map(|c| c.prob * chi2_cdf_2dof(c.cov.mahalanobis_sq(&(truth - c.mean))))
            .sum(),
        CoverageEstimator::HighestDensity { .. } if active.len() == 1 => {
            let c = active[0];
            chi2_cdf_2dof(c.cov.mahalanobis_sq(&(truth - c.mean)))
        }
        CoverageEstimator::HighestDensity { samples, seed } => {
            // Per-component log weight, inverse and square root, computed once.
            let parts: Vec<(f64, Mat2, Mat2, Vec2)> = active
                .iter()
                .map(|c| {
                    let norm = c.prob.ln() - (2.0 * PI).ln() - 0.5 * c.cov.determinant().ln();
                    (norm, c.cov.inverse(), c.cov.sqrt(), c.mean)
                })
                .collect();
            let log_pdf = |x: &Vec2| {
                log_sum_exp(parts.iter().map(|(norm, inv, _, mean)| {
                    let d = x - mean;
                    norm - 0.5 * d.dot(&(inv * d))
                }))
            };
            let level = log_pdf(truth);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ record.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let weights: Vec<f64> = active.iter().map(|c| c.prob).collect();
            let Ok(picker) = WeightedIndex::new(&weights) else {
                return 0.0;
            };
            let n = samples.max(1);
            let inside = (0..n)
                .filter(|_| {
                    let (_, _, sqrt, mean) = &parts[picker.sample(&mut rng)];
                    let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                    log_pdf(&(mean + sqrt * eps)) > level
                })
                .count();
            inside as f64 / n as f64
        }
    }
}

/// Average orthogonal distance between the empirical CDF of coverage scores
/// and the diagonal, over `ECE_LEVELS` evenly spaced levels in `[0, 1]`.
pub fn ece_from_scores(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::domain("ECE needs at least one record"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let total: f64 = (0..ECE_LEVELS)
        .map(|l| {
            let q = l as f64 / (ECE_LEVELS - 1) as f64;
            let below = sorted.partition_point(|c| *c <= q) as f64;
            (below / n - q).abs()
        })
        .sum();
    Ok(total / ECE_LEVELS as f64 / 2f64.sqrt())
}

/// Expected calibration error over per-step (truth, mixture) records.
pub fn ece(records: &[(Vec2, Vec<Component>)], estimator: CoverageEstimator) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::domain("ECE needs at least one record"));
    }
    let scores: Vec<f64> = records
        .iter()
        .enumerate()
        .map(|(i, (truth, mix))| coverage_score(truth, mix, estimator, i as u64))
        .collect();
    ece_from_scores(&scores)
}

/// One entry of a prediction dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub agent_id: usize,
    pub t: usize,
    pub modes: Vec<ModeRecord>,
    pub truth: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub prob: f64,
    pub means: Vec<[f64; 2]>,
    /// Packed symmetric `[xx, xy, yy]`.
    pub covs: Vec<[f64; 3]>,
}

impl PredictionRecord {
    pub fn from_prediction(agent_id: usize, t: usize, pred: &GmmPrediction, truth: &[Vec2]) -> Self {
        Self {
            agent_id,
            t,
            modes: pred
                .modes
                .iter()
                .map(|m| ModeRecord {
                    prob: m.prob,
                    means: m.means.iter().map(|v| [v.x, v.y]).collect(),
                    covs: m.covs.iter().map(|c| c.packed()).collect(),
                })
                .collect(),
            truth: truth.iter().map(|v| [v.x, v.y]).collect(),
            dt: Some(pred.dt),
        }
    }

    pub fn prediction(&self) -> Result<GmmPrediction> {
        let horizon = self.modes.first().map(|m| m.means.len()).unwrap_or(0);
        let modes = self
            .modes
            .iter()
            .map(|m| {
                Ok(Mode {
                    prob: m.prob,
                    means: m.means.iter().map(|p| Vec2::new(p[0], p[1])).collect(),
                    covs: m
                        .covs
                        .iter()
                        .map(|c| Covariance2::new(c[0], c[1], c[2]))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        GmmPrediction::new(modes, horizon, self.dt.unwrap_or(1.0))
    }

    pub fn truth(&self) -> Vec<Vec2> {
        self.truth.iter().map(|p| Vec2::new(p[0], p[1])).collect()
    }
}

/// Mean and standard error (sample std / sqrt(n)); the error is 0 for `n < 2`.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Aggregated prediction metrics over a dump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PredictionSummary {
    pub records: usize,
    pub min_ade: (f64, f64),
    pub min_fde: (f64, f64),
    pub nll: (f64, f64),
    pub entropy: (f64, f64),
    pub ece: f64,
}

/// Number of samples for best-of-K displacement errors.
pub const MIN_ADE_SAMPLES: usize = 5;

/// Evaluates a full dump: minADE5/minFDE5 from seeded samples, NLL, entropy and ECE.
pub fn summarize_records(records: &[PredictionRecord], seed: u64) -> Result<PredictionSummary> {
    if records.is_empty() {
        return Err(Error::domain("prediction dump is empty"));
    }
    let mut ade = Vec::with_capacity(records.len());
    let mut fde = Vec::with_capacity(records.len());
    let mut nll = Vec::with_capacity(records.len());
    let mut ent = Vec::with_capacity(records.len());
    let mut steps = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let pred = r.prediction()?;
        let truth = r.truth();
        let samples = sample_trajectories(&pred, MIN_ADE_SAMPLES, seed.wrapping_add(i as u64))?;
        let (a, f) = min_ade_fde(&samples, &truth)?;
        ade.push(a);
        fde.push(f);
        nll.push(gmm_nll(&pred, &truth)?);
        ent.push(avg_entropy(&pred));
        steps.extend(truth.iter().enumerate().map(|(k, x)| (*x, pred.step_mixture(k))));
    }
    Ok(PredictionSummary {
        records: records.len(),
        min_ade: mean_stderr(&ade),
        min_fde: mean_stderr(&fde),
        nll: mean_stderr(&nll),
        entropy: mean_stderr(&ent),
        ece: ece(&steps, CoverageEstimator::default())?,
    })
}
