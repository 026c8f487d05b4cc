//! Brute-force and Monte-Carlo checks of the keep-out geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use uasmpc::geometry::{
    dist_to_zonotope, inv_sqrt, Covariance2, CoverageLevel, KeepOut, Mat2, OverlapRect, Vec2, Zonotope2,
};
use uasmpc::Result;

pub const SCALE_LEVELS: [f64; 8] = [0.25, 1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Random covariance with eigenvalues in `[0.05, 4]` and a random orientation.
pub fn random_covariance(rng: &mut impl Rng) -> Covariance2 {
    let l1 = rng.random_range(0.05..4.0);
    let l2 = rng.random_range(0.05..4.0);
    let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = th.sin_cos();
    let r = Mat2::new(c, -s, s, c);
    let m = r * Mat2::new(l1, 0.0, 0.0, l2) * r.transpose();
    Covariance2::new(m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]).expect("valid covariance")
}

pub fn random_rect(rng: &mut impl Rng) -> OverlapRect {
    OverlapRect::new(rng.random_range(0.5..6.0), rng.random_range(0.3..3.0)).expect("positive extents")
}

/// Distance from `z` to the parallelogram found by a coarse grid over its
/// generator coordinates followed by repeated local grid refinement.
pub fn brute_force_distance(z: &Vec2, b: &Zonotope2) -> f64 {
    let (v1, v2) = b.generators();
    let eval = |s: f64, t: f64| (z - v1 * s - v2 * t).norm();
    const GRID: usize = 40;
    let (mut cs, mut ct, mut half) = (0.0, 0.0, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..40 {
        let (mut bs, mut bt) = (cs, ct);
        for i in 0..=GRID {
            let s = (cs - half + 2.0 * half * i as f64 / GRID as f64).clamp(-1.0, 1.0);
            for j in 0..=GRID {
                let t = (ct - half + 2.0 * half * j as f64 / GRID as f64).clamp(-1.0, 1.0);
                let d = eval(s, t);
                if d < best {
                    best = d;
                    bs = s;
                    bt = t;
                }
            }
        }
        cs = bs;
        ct = bt;
        half *= 0.25;
    }
    best
}

/// Largest disagreement between the closed-form and brute-force distances.
pub fn distance_oracle(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let cov = random_covariance(&mut rng);
        let rect = random_rect(&mut rng);
        let b = Zonotope2::from_rect(&rect, &inv_sqrt(&cov)?)?;
        let scale = b.corners().iter().map(|c| c.norm()).fold(0.0, f64::max);
        let z = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)) * scale;
        let closed = dist_to_zonotope(&z, &b).distance;
        worst = worst.max((closed - brute_force_distance(&z, &b)).abs());
    }
    Ok(worst)
}

/// A point at exactly zero margin: bisection along a random ray in the
/// whitened frame, mapped back to the world frame.
pub fn boundary_point(ko: &KeepOut, cov: &Covariance2, rng: &mut impl Rng) -> Vec2 {
    let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let dir = Vec2::new(th.cos(), th.sin());
    let sqrt = cov.sqrt();
    let at = |t: f64| ko.mu + sqrt * (dir * t);
    let (mut lo, mut hi) = (0.0, 1.0);
    while ko.margin(&at(hi)) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ko.margin(&at(mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(hi)
}

/// Fraction of sampled agent positions whose rectangle overlaps the ego at `x`.
pub fn collision_frequency(
    x: &Vec2,
    mu: &Vec2,
    cov: &Covariance2,
    rect: &OverlapRect,
    n: usize,
    rng: &mut impl Rng,
) -> f64 {
    let l = cov.sqrt();
    let mut hits = 0usize;
    for _ in 0..n {
        let e = Vec2::new(StandardNormal.sample(rng), StandardNormal.sample(rng));
        let o = mu + l * e;
        if rect.contains(&(x - o)) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChanceOutcome {
    pub p: f64,
    pub frequency: f64,
    pub bound: f64,
}

/// Collision frequencies at zero-margin points for random configurations.
pub fn chance_constraint_check(configs: usize, samples: usize, seed: u64) -> Result<Vec<ChanceOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(configs * 3);
    for _ in 0..configs {
        let cov = random_covariance(&mut rng);
        let rect = random_rect(&mut rng);
        let mu = Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        for p in [0.8, 0.9, 0.95] {
            let level = CoverageLevel::new(p)?;
            let ko = KeepOut::new(mu, &cov, rect, level.beta)?;
            let x = boundary_point(&ko, &cov, &mut rng);
            let frequency = collision_frequency(&x, &mu, &cov, &rect, samples, &mut rng);
            let stderr = (p * (1.0 - p) / samples as f64).sqrt();
            out.push(ChanceOutcome {
                p,
                frequency,
                bound: (1.0 - p) + 3.0 * stderr,
            });
        }
    }
    Ok(out)
}

/// Trials where a point feasible at the larger scale is infeasible at the smaller one.
pub fn nesting_counterexamples(trials: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta = CoverageLevel::new(0.9)?.beta;
    let mut bad = 0;
    for _ in 0..trials {
        let cov = random_covariance(&mut rng);
        let rect = random_rect(&mut rng);
        let mu = Vec2::zeros();
        let x = Vec2::new(rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0));
        let i = rng.random_range(0..SCALE_LEVELS.len());
        let j = rng.random_range(0..SCALE_LEVELS.len());
        let (small, large) = if SCALE_LEVELS[i] <= SCALE_LEVELS[j] {
            (SCALE_LEVELS[i], SCALE_LEVELS[j])
        } else {
            (SCALE_LEVELS[j], SCALE_LEVELS[i])
        };
        let g_large = KeepOut::new(mu, &cov.scaled(large)?, rect, beta)?.margin(&x);
        let g_small = KeepOut::new(mu, &cov.scaled(small)?, rect, beta)?.margin(&x);
        if g_large >= 0.0 && g_small < 0.0 {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Sample sizes of the full report and of the quick variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckSizes {
    pub distance_trials: usize,
    pub chance_configs: usize,
    pub chance_samples: usize,
    pub nesting_trials: usize,
}

impl CheckSizes {
    pub const FULL: Self = Self {
        distance_trials: 1000,
        chance_configs: 50,
        chance_samples: 100_000,
        nesting_trials: 10_000,
    };
    pub const QUICK: Self = Self {
        distance_trials: 100,
        chance_configs: 10,
        chance_samples: 20_000,
        nesting_trials: 1000,
    };
}

pub const DISTANCE_TOL: f64 = 1e-4;

pub fn run_geometry_checks(sizes: CheckSizes, seed: u64) -> Result<Vec<CheckReport>> {
    let worst = distance_oracle(sizes.distance_trials, seed)?;
    let chance = chance_constraint_check(sizes.chance_configs, sizes.chance_samples, seed.wrapping_add(1))?;
    let exceed = chance.iter().filter(|c| c.frequency > c.bound).count();
    let max_ratio = chance.iter().map(|c| c.frequency / (1.0 - c.p)).fold(0.0, f64::max);
    let nesting = nesting_counterexamples(sizes.nesting_trials, seed.wrapping_add(2))?;
    Ok(vec![
        CheckReport {
            name: "distance",
            passed: worst <= DISTANCE_TOL,
            detail: format!(
                "{} random cases, max |closed form - brute force| = {worst:.2e} (tol {DISTANCE_TOL:.0e})",
                sizes.distance_trials
            ),
        },
        CheckReport {
            name: "chance",
            passed: exceed == 0,
            detail: format!(
                "{} zero-margin cases x {} samples, {exceed} above (1-p)+3se, max freq/(1-p) = {max_ratio:.3}",
                chance.len(),
                sizes.chance_samples
            ),
        },
        CheckReport {
            name: "nesting",
            passed: nesting == 0,
            detail: format!("{} scale pairs, {nesting} counterexamples", sizes.nesting_trials),
        },
    ])
}
