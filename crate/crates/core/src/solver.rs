//! Small dense nonlinear program solver.
//!
//! Augmented Lagrangian (PHR form) over inequality constraints `c(x) >= 0`,
//! with an L-BFGS inner minimizer and Armijo backtracking. Constraints marked
//! soft are relaxed to `c(x) + s >= 0` with a slack `s >= 0` charged
//! `w (s + s^2)`, so every subproblem stays well posed when the soft
//! constraints cannot all be met. The slack has a closed-form minimizer inside
//! each augmented Lagrangian term and is eliminated analytically.

use crate::error::{Error, Result};
use crate::geometry::{Covariance2, KeepOut, OverlapRect, Vec2, Zonotope2};

/// Nonlinear program `min f(x) s.t. c(x) >= 0, lb <= x <= ub`.
pub trait NlpProblem {
    fn dim(&self) -> usize;

    fn num_constraints(&self) -> usize;

    fn objective(&self, x: &[f64]) -> f64;

    /// Writes `c(x)`; entries `>= 0` are feasible.
    fn constraints(&self, x: &[f64], out: &mut [f64]);

    /// Analytic objective gradient. Return `false` to fall back to central differences.
    fn gradient(&self, _x: &[f64], _grad: &mut [f64]) -> bool {
        false
    }

    /// Row-major `num_constraints x dim` Jacobian. Return `false` to fall back
    /// to central differences.
    fn jacobian(&self, _x: &[f64], _jac: &mut [f64]) -> bool {
        false
    }

    /// Constraint values used for status decisions. Defaults to [`Self::constraints`];
    /// problems whose `constraints` are a surrogate override this with the exact values.
    fn exact_constraints(&self, x: &[f64], out: &mut [f64]) {
        self.constraints(x, out)
    }

    /// Whether constraint `i` may be relaxed by a penalized slack.
    fn is_soft(&self, _i: usize) -> bool {
        false
    }

    fn bounds(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub feasibility_tol: f64,
    pub stationarity_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Weight `w` of the slack charge `w (s + s^2)`.
    pub slack_weight: f64,
    pub lbfgs_memory: usize,
    /// Step for central-difference fallbacks.
    pub fd_step: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            feasibility_tol: 1e-6,
            stationarity_tol: 1e-5,
            max_outer: 200,
            max_inner: 500,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e10,
            slack_weight: 1e4,
            lbfgs_memory: 10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterRecord {
    pub objective: f64,
    /// Violation of the slack-relaxed constraints.
    pub violation: f64,
    pub stationarity: f64,
    pub penalty: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest violation of the exact, unrelaxed constraints.
    pub max_violation: f64,
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub status: SolveStatus,
    pub multipliers: Vec<f64>,
    /// Accepted outer iterates in order.
    pub history: Vec<OuterRecord>,
}

/// Original constraints followed by variable-bound rows.
struct Relaxed<'a, P: NlpProblem + ?Sized> {
    inner: &'a P,
    n: usize,
    m: usize,
    soft: Vec<bool>,
    bounds: Vec<(usize, f64, bool)>,
    weight: f64,
    fd_step: f64,
}

impl<'a, P: NlpProblem + ?Sized> Relaxed<'a, P> {
    fn new(inner: &'a P, opts: &SolverOptions) -> Self {
        let n = inner.dim();
        let m = inner.num_constraints();
        let mut bounds = Vec::new();
        if let Some((lb, ub)) = inner.bounds() {
            for i in 0..n {
                if lb[i].is_finite() {
                    bounds.push((i, lb[i], true));
                }
                if ub[i].is_finite() {
                    bounds.push((i, ub[i], false));
                }
            }
        }
        let mut soft: Vec<bool> = (0..m).map(|i| inner.is_soft(i)).collect();
        soft.resize(m + bounds.len(), false);
        Self {
            inner,
            n,
            m,
            soft,
            bounds,
            weight: opts.slack_weight,
            fd_step: opts.fd_step,
        }
    }

    fn num_constraints(&self) -> usize {
        self.m + self.bounds.len()
    }

    fn objective(&self, x: &[f64]) -> f64 {
        self.inner.objective(x)
    }

    fn gradient(&self, x: &[f64], g: &mut [f64]) {
        if !self.inner.gradient(x, g) {
            fd_gradient(|v| self.inner.objective(v), x, self.fd_step, g);
        }
    }

    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        self.inner.constraints(x, &mut c[..self.m]);
        for (r, &(i, b, lower)) in self.bounds.iter().enumerate() {
            c[self.m + r] = if lower { x[i] - b } else { b - x[i] };
        }
    }

    /// Accumulates `g -= J^T w`.
    fn sub_jt_times(&self, x: &[f64], w: &[f64], g: &mut [f64], jac: &mut Vec<f64>) {
        let n = self.n;
        if self.m > 0 {
            jac.resize(self.m * n, 0.0);
            if !self.inner.jacobian(x, jac) {
                fd_jacobian(|v, out| self.inner.constraints(v, out), x, self.m, self.fd_step, jac);
            }
        }
        for i in 0..self.m {
            if w[i] == 0.0 {
                continue;
            }
            let row = &jac[i * n..(i + 1) * n];
            for (gj, r) in g.iter_mut().zip(row) {
                *gj -= w[i] * r;
            }
        }
        for (r, &(i, _, lower)) in self.bounds.iter().enumerate() {
            g[i] -= if lower { w[self.m + r] } else { -w[self.m + r] };
        }
    }

    /// Slack `s >= 0` minimizing `w (s + s^2) + psi(c + s)` for a soft row.
    fn slack(&self, i: usize, c: f64, lambda: f64, mu: f64) -> f64 {
        if !self.soft[i] {
            return 0.0;
        }
        ((lambda - mu * c - self.weight) / (2.0 * self.weight + mu)).max(0.0)
    }

    fn slack_cost(&self, s: f64) -> f64 {
        self.weight * (s + s * s)
    }
}

fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64, g: &mut [f64]) {
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        xp[i] = x[i] + step;
        let fp = f(&xp);
        xp[i] = x[i] - step;
        let fm = f(&xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * step);
    }
}

fn fd_jacobian(c: impl Fn(&[f64], &mut [f64]), x: &[f64], m: usize, h: f64, jac: &mut [f64]) {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut cp = vec![0.0; m];
    let mut cm = vec![0.0; m];
    for j in 0..n {
        let step = h * x[j].abs().max(1.0);
        xp[j] = x[j] + step;
        c(&xp, &mut cp);
        xp[j] = x[j] - step;
        c(&xp, &mut cm);
        xp[j] = x[j];
        for i in 0..m {
            jac[i * n + j] = (cp[i] - cm[i]) / (2.0 * step);
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn violation(c: &[f64]) -> f64 {
    c.iter().fold(0.0, |a, &v| a.max(-v))
}

struct Lagrangian<'r, 'a, P: NlpProblem + ?Sized> {
    prob: &'r Relaxed<'a, P>,
    lambda: &'r [f64],
    mu: f64,
    c: Vec<f64>,
    slack: Vec<f64>,
    w: Vec<f64>,
    jac: Vec<f64>,
}

impl<'r, 'a, P: NlpProblem + ?Sized> Lagrangian<'r, 'a, P> {
    fn new(prob: &'r Relaxed<'a, P>, lambda: &'r [f64], mu: f64) -> Self {
        let mc = prob.num_constraints();
        Lagrangian {
            prob,
            lambda,
            mu,
            c: vec![0.0; mc],
            slack: vec![0.0; mc],
            w: vec![0.0; mc],
            jac: Vec::new(),
        }
    }

    fn value(&mut self, x: &[f64]) -> f64 {
        self.prob.constraints(x, &mut self.c);
        let mut v = self.prob.objective(x);
        for i in 0..self.c.len() {
            let li = self.lambda[i];
            let s = self.prob.slack(i, self.c[i], li, self.mu);
            self.slack[i] = s;
            let t = (li - self.mu * (self.c[i] + s)).max(0.0);
            v += self.prob.slack_cost(s) + (t * t - li * li) / (2.0 * self.mu);
        }
        v
    }

    /// Value and gradient; leaves `c(x)`, the slacks and the updated
    /// multipliers in `self`.
    fn value_grad(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        let v = self.value(x);
        for i in 0..self.c.len() {
            self.w[i] = (self.lambda[i] - self.mu * (self.c[i] + self.slack[i])).max(0.0);
        }
        self.prob.gradient(x, g);
        let w = std::mem::take(&mut self.w);
        let mut jac = std::mem::take(&mut self.jac);
        self.prob.sub_jt_times(x, &w, g, &mut jac);
        self.w = w;
        self.jac = jac;
        v
    }

    fn relaxed_violation(&self) -> f64 {
        self.c.iter().zip(&self.slack).fold(0.0, |a, (c, s)| a.max(-(c + s)))
    }

    fn slack_objective(&self, x: &[f64]) -> f64 {
        self.prob.objective(x) + self.slack.iter().map(|s| self.prob.slack_cost(*s)).sum::<f64>()
    }
}

struct InnerResult {
    iterations: usize,
    grad_norm: f64,
}

/// L-BFGS with Armijo backtracking on the augmented Lagrangian.
fn minimize_inner<P: NlpProblem + ?Sized>(
    lag: &mut Lagrangian<'_, '_, P>,
    y: &mut [f64],
    opts: &SolverOptions,
    tol: f64,
    outer: usize,
) -> Result<InnerResult> {
    let n = y.len();
    let mut g = vec![0.0; n];
    let mut f = lag.value_grad(y, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "augmented Lagrangian",
            outer,
            inner: 0,
            iterate: y.to_vec(),
        });
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho: Vec<f64> = Vec::new();
    let mut d = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.lbfgs_memory];
    let mut it = 0;
    while it < opts.max_inner {
        if inf_norm(&g) <= tol {
            break;
        }
        // Two-loop recursion.
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        let k = s_hist.len();
        for i in (0..k).rev() {
            let a = rho[i] * dot(&s_hist[i], &d);
            alpha_buf[i] = a;
            d.iter_mut().zip(&y_hist[i]).for_each(|(di, yi)| *di -= a * yi);
        }
        let gamma = if k > 0 {
            dot(&s_hist[k - 1], &y_hist[k - 1]) / dot(&y_hist[k - 1], &y_hist[k - 1])
        } else {
            1.0 / inf_norm(&g).max(1.0)
        };
        d.iter_mut().for_each(|di| *di *= gamma);
        for i in 0..k {
            let b = rho[i] * dot(&y_hist[i], &d);
            d.iter_mut()
                .zip(&s_hist[i])
                .for_each(|(di, si)| *di += (alpha_buf[i] - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            d.iter_mut()
                .zip(&g)
                .for_each(|(di, gi)| *di = -gi / inf_norm(&g).max(1.0));
            slope = dot(&g, &d);
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            trial
                .iter_mut()
                .zip(y.iter().zip(&d))
                .for_each(|(t, (yi, di))| *t = yi + step * di);
            let ft = lag.value(&trial);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        it += 1;
        if !accepted {
            if s_hist.is_empty() {
                break;
            }
            s_hist.clear();
            y_hist.clear();
            rho.clear();
            continue;
        }
        let f_new = lag.value_grad(&trial, &mut g_new);
        if g_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "augmented Lagrangian gradient",
                outer,
                inner: it,
                iterate: trial.clone(),
            });
        }
        let s: Vec<f64> = trial.iter().zip(y.iter()).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        y.copy_from_slice(&trial);
        std::mem::swap(&mut g, &mut g_new);
        let progress = f - f_new;
        f = f_new;
        if sy > 1e-12 * dot(&yv, &yv).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == opts.lbfgs_memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho.remove(0);
            }
            rho.push(1.0 / sy);
            s_hist.push(s);
            y_hist.push(yv);
        }
        if progress.abs() <= 1e-15 * f.abs().max(1.0) && inf_norm(&g) <= 1e3 * tol {
            break;
        }
    }
    // Leave c and w consistent with the final iterate.
    let mut gf = vec![0.0; n];
    lag.value_grad(y, &mut gf);
    Ok(InnerResult {
        iterations: it,
        grad_norm: inf_norm(&gf),
    })
}

fn check_finite(v: &[f64], what: &'static str, x: &[f64]) -> Result<()> {
    if v.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite {
            what,
            outer: 0,
            inner: 0,
            iterate: x.to_vec(),
        });
    }
    Ok(())
}

/// Relative change of the accepted iterate below which an outer iteration
/// counts as stalled.
const STALL_STEP: f64 = 1e-10;
/// Consecutive stalled outer iterations before giving up.
const STALL_LIMIT: usize = 3;

/// Solves `problem` from `x0`.
pub fn solve<P: NlpProblem + ?Sized>(problem: &P, x0: &[f64], opts: &SolverOptions) -> Result<SolveReport> {
    solve_from(problem, x0, None, opts)
}

/// Solves `problem` from `x0` and optional initial multipliers (one per
/// constraint of `problem`), e.g. those of a previous [`SolveReport`].
pub fn solve_from<P: NlpProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    multipliers: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<SolveReport> {
    let n = problem.dim();
    if x0.len() != n {
        return Err(Error::domain(format!(
            "x0 has length {}, problem dimension is {n}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("x0 must be finite"));
    }
    let relaxed = Relaxed::new(problem, opts);
    let mc = relaxed.num_constraints();

    let f0 = problem.objective(x0);
    check_finite(&[f0], "objective", x0)?;
    let mut c0 = vec![0.0; problem.num_constraints()];
    problem.constraints(x0, &mut c0);
    check_finite(&c0, "constraints", x0)?;

    let mut y = x0.to_vec();
    let mut lambda = vec![0.0; mc];
    if let Some(l0) = multipliers {
        if l0.len() != problem.num_constraints() {
            return Err(Error::domain(format!(
                "expected {} initial multipliers, got {}",
                problem.num_constraints(),
                l0.len()
            )));
        }
        for (l, v) in lambda.iter_mut().zip(l0) {
            *l = v.max(0.0);
        }
    }
    let mut mu = opts.initial_penalty;

    let mut history = Vec::new();
    let mut accepted_y = y.clone();
    let mut accepted_lambda = lambda.clone();
    let mut accepted_violation = f64::INFINITY;
    let mut stationarity = f64::INFINITY;
    let mut total_inner = 0;
    let mut converged = false;
    let mut outer = 0;
    let mut stalled = 0;

    while outer < opts.max_outer {
        outer += 1;
        let mut lag = Lagrangian::new(&relaxed, &lambda, mu);
        let inner = minimize_inner(&mut lag, &mut y, opts, opts.stationarity_tol, outer)?;
        total_inner += inner.iterations;
        let viol = lag.relaxed_violation();
        let objective = lag.slack_objective(&y);
        let new_lambda = lag.w.clone();

        if viol > accepted_violation.max(opts.feasibility_tol) {
            // Reject: restore the accepted point and tighten the penalty.
            y.copy_from_slice(&accepted_y);
            if mu >= opts.max_penalty {
                break;
            }
            mu = (mu * opts.penalty_growth).min(opts.max_penalty);
            continue;
        }

        stationarity = inner.grad_norm;
        history.push(OuterRecord {
            objective,
            violation: viol,
            stationarity,
            penalty: mu,
            inner_iterations: inner.iterations,
        });
        let previous = accepted_violation;
        let step = y.iter().zip(&accepted_y).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = 1.0 + inf_norm(&y);
        accepted_violation = viol;
        lambda = new_lambda;
        accepted_y.copy_from_slice(&y);
        accepted_lambda.copy_from_slice(&lambda);

        if viol <= opts.feasibility_tol && stationarity <= opts.stationarity_tol {
            converged = true;
            break;
        }
        // Nonsmooth points can keep the residual above tolerance forever.
        if viol <= opts.feasibility_tol && step <= STALL_STEP * scale {
            stalled += 1;
            if stalled >= STALL_LIMIT {
                break;
            }
        } else {
            stalled = 0;
        }
        if viol > opts.feasibility_tol && viol > 0.25 * previous {
            mu = (mu * opts.penalty_growth).min(opts.max_penalty);
        }
    }

    let x = accepted_y[..n].to_vec();
    let mut exact = vec![0.0; problem.num_constraints()];
    problem.exact_constraints(&x, &mut exact);
    check_finite(&exact, "exact constraints", &x)?;
    let mut max_violation = violation(&exact);
    if let Some((lb, ub)) = problem.bounds() {
        for i in 0..n {
            max_violation = max_violation.max(lb[i] - x[i]).max(x[i] - ub[i]);
        }
    }
    let status = if max_violation > opts.feasibility_tol {
        SolveStatus::Degraded
    } else if converged {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIter
    };
    Ok(SolveReport {
        objective: problem.objective(&x),
        x,
        max_violation,
        stationarity,
        outer_iterations: outer,
        inner_iterations: total_inner,
        status,
        multipliers: accepted_lambda[..problem.num_constraints()].to_vec(),
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    /// Largest scaled error `|analytic - fd| / max(1, |analytic|, |fd|)`.
    pub max_rel_error: f64,
    pub objective_error: f64,
    pub jacobian_error: f64,
    /// `None` for the objective, `Some(row)` for a constraint row.
    pub worst_row: Option<usize>,
    pub worst_col: usize,
    pub passed: bool,
}

fn scaled_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite differences against the problem's analytic derivatives.
/// Rows without an analytic derivative are skipped.
pub fn check_gradients<P: NlpProblem + ?Sized>(problem: &P, x: &[f64], h: f64, tol: f64) -> Result<GradientReport> {
    if !(h > 0.0) {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let n = problem.dim();
    let m = problem.num_constraints();
    let mut report = GradientReport {
        max_rel_error: 0.0,
        objective_error: 0.0,
        jacobian_error: 0.0,
        worst_row: None,
        worst_col: 0,
        passed: true,
    };
    let mut g = vec![0.0; n];
    if problem.gradient(x, &mut g) {
        let mut fd = vec![0.0; n];
        let mut xp = x.to_vec();
        for j in 0..n {
            xp[j] = x[j] + h;
            let fp = problem.objective(&xp);
            xp[j] = x[j] - h;
            let fm = problem.objective(&xp);
            xp[j] = x[j];
            fd[j] = (fp - fm) / (2.0 * h);
        }
        for j in 0..n {
            let e = scaled_error(g[j], fd[j]);
            if e > report.objective_error {
                report.objective_error = e;
            }
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst_row = None;
                report.worst_col = j;
            }
        }
    }
    let mut jac = vec![0.0; m * n];
    if m > 0 && problem.jacobian(x, &mut jac) {
        let mut xp = x.to_vec();
        let mut cp = vec![0.0; m];
        let mut cm = vec![0.0; m];
        for j in 0..n {
            xp[j] = x[j] + h;
            problem.constraints(&xp, &mut cp);
            xp[j] = x[j] - h;
            problem.constraints(&xp, &mut cm);
            xp[j] = x[j];
            for i in 0..m {
                let e = scaled_error(jac[i * n + j], (cp[i] - cm[i]) / (2.0 * h));
                if e > report.jacobian_error {
                    report.jacobian_error = e;
                }
                if e > report.max_rel_error {
                    report.max_rel_error = e;
                    report.worst_row = Some(i);
                    report.worst_col = j;
                }
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Temperature of the softmin surrogate.
pub const SMOOTHING_TAU: f64 = 1e-3;

/// Softmin over the distinct candidate nearest points of `b`: the interior
/// (distance 0, only when `z` is inside), edge projections strictly inside their
/// edge, and the four corners. Returns the value and its gradient in `z`.
pub fn softmin_distance(z: &Vec2, b: &Zonotope2, tau: f64) -> (f64, Vec2) {
    let mut cands: Vec<(f64, Vec2)> = Vec::with_capacity(9);
    if b.contains(z) {
        cands.push((0.0, Vec2::zeros()));
    }
    let (v1, v2) = b.generators();
    let edges = [(v1, v2), (-v1, v2), (v2, v1), (-v2, v1)];
    for (anchor, dir) in edges {
        let t = dir.dot(&(z - anchor)) / dir.norm_squared();
        if t > -1.0 && t < 1.0 {
            let p = anchor + dir * t;
            cands.push(point_candidate(z, &p));
        }
    }
    for c in b.corners() {
        cands.push(point_candidate(z, &c));
    }
    let dmin = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let weights: Vec<f64> = cands.iter().map(|c| (-(c.0 - dmin) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    let value = dmin - tau * total.ln();
    let grad = cands
        .iter()
        .zip(&weights)
        .fold(Vec2::zeros(), |acc, (c, w)| acc + c.1 * (w / total));
    (value, grad)
}

fn point_candidate(z: &Vec2, p: &Vec2) -> (f64, Vec2) {
    let diff = z - p;
    let d = diff.norm();
    (d, if d > 0.0 { diff / d } else { Vec2::zeros() })
}

/// Smoothed counterpart of [`crate::geometry::constraint_value`], within
/// `tau ln 9` of the exact value.
pub fn smooth_constraint_value(
    x: &Vec2,
    mu: &Vec2,
    cov: &Covariance2,
    rect: &OverlapRect,
    beta: f64,
    tau: f64,
) -> Result<f64> {
    let ko = KeepOut::new(*mu, cov, *rect, beta)?;
    Ok(smooth_margin_grad(&ko, x, tau).0)
}

/// Smoothed margin and its gradient in `x`.
pub fn smooth_margin_grad(ko: &KeepOut, x: &Vec2, tau: f64) -> (f64, Vec2) {
    let (v, gz) = softmin_distance(&ko.whiten(x), &ko.zonotope, tau);
    (v - ko.radius, ko.whitening.transpose() * gz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    struct Bowl {
        center: Vec<f64>,
    }

    impl NlpProblem for Bowl {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn num_constraints(&self) -> usize {
            0
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum()
        }
        fn constraints(&self, _x: &[f64], _out: &mut [f64]) {}
        fn gradient(&self, x: &[f64], g: &mut [f64]) -> bool {
            for i in 0..x.len() {
                g[i] = 2.0 * (x[i] - self.center[i]);
            }
            true
        }
    }

    #[test]
    fn quadratic_bowl() {
        let p = Bowl {
            center: vec![1.5, -2.0, 0.25],
        };
        let r = solve(&p, &[0.0; 3], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        for (a, c) in r.x.iter().zip(&p.center) {
            assert!((a - c).abs() < 1e-7);
        }
    }

    struct ActiveBound {
        corrupt: bool,
    }

    impl NlpProblem for ActiveBound {
        fn dim(&self) -> usize {
            1
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0]
        }
        fn constraints(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] - 1.0;
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) -> bool {
            g[0] = if self.corrupt { 3.0 * x[0] } else { 2.0 * x[0] };
            true
        }
        fn jacobian(&self, _x: &[f64], jac: &mut [f64]) -> bool {
            jac[0] = 1.0;
            true
        }
    }

    #[test]
    fn active_inequality() {
        let r = solve(&ActiveBound { corrupt: false }, &[-3.0], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-6, "{}", r.x[0]);
        assert!((r.multipliers[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn gradient_check_flags_corruption() {
        let ok = check_gradients(&ActiveBound { corrupt: false }, &[0.7], 1e-5, 1e-8).unwrap();
        assert!(ok.passed, "{ok:?}");
        let bad = check_gradients(&ActiveBound { corrupt: true }, &[0.7], 1e-5, 1e-8).unwrap();
        assert!(!bad.passed);
        assert!(bad.max_rel_error > 0.1);
        assert!(check_gradients(&ActiveBound { corrupt: false }, &[0.7], 0.0, 1e-8).is_err());
    }

    struct NanObjective;

    impl NlpProblem for NanObjective {
        fn dim(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            0
        }
        fn objective(&self, _x: &[f64]) -> f64 {
            f64::NAN
        }
        fn constraints(&self, _x: &[f64], _out: &mut [f64]) {}
    }

    #[test]
    fn nan_reports_iterate() {
        match solve(&NanObjective, &[1.0, 2.0], &SolverOptions::default()) {
            Err(Error::NonFinite { iterate, .. }) => assert_eq!(iterate, vec![1.0, 2.0]),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    /// `min x^2` with an infeasible soft constraint pair `x >= 1`, `x <= -1`.
    struct Infeasible;

    impl NlpProblem for Infeasible {
        fn dim(&self) -> usize {
            1
        }
        fn num_constraints(&self) -> usize {
            2
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0]
        }
        fn constraints(&self, x: &[f64], out: &mut [f64]) {
            out[0] = x[0] - 1.0;
            out[1] = -1.0 - x[0];
        }
        fn is_soft(&self, _i: usize) -> bool {
            true
        }
    }

    #[test]
    fn soft_constraints_degrade_gracefully() {
        let r = solve(&Infeasible, &[0.3], &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolveStatus::Degraded);
        assert!(r.x[0].abs() < 1e-3);
        assert!((r.max_violation - 1.0).abs() < 1e-3);
    }

    #[test]
    fn determinism() {
        let a = solve(&ActiveBound { corrupt: false }, &[-3.0], &SolverOptions::default()).unwrap();
        let b = solve(&ActiveBound { corrupt: false }, &[-3.0], &SolverOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn softmin_interior_and_exterior() {
        let rect = OverlapRect::new(2.0, 1.0).unwrap();
        let cov = Covariance2::new(0.5, 0.1, 0.3).unwrap();
        let mu = Vec2::new(1.0, 1.0);
        let beta = 4.6;
        let inside = smooth_constraint_value(&mu, &mu, &cov, &rect, beta, SMOOTHING_TAU).unwrap();
        assert!((inside + beta.sqrt()).abs() <= 3.0 * SMOOTHING_TAU * 9f64.ln());
        let far = Vec2::new(12.0, 1.2);
        let exact = crate::geometry::constraint_value(&far, &mu, &cov, &rect, beta).unwrap();
        let smooth = smooth_constraint_value(&far, &mu, &cov, &rect, beta, SMOOTHING_TAU).unwrap();
        assert_relative_eq!(smooth, exact, epsilon = 1e-2 * SMOOTHING_TAU);
    }
}
