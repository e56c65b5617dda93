//! Gradient integration: the feasibility-recovery step.
//!
//! When the trust-region subproblem has no feasible point, the policy is
//! pulled back toward the feasible set by one quadratic program over all
//! constraint gradients:
//!
//! `g* = argmin 1/2 g'Hg  s.t.  g_k'g + c_k <= 0` with the truncated
//! threshold `c_k = min(sqrt(2 eps g_k'H^{-1}g_k), F_k - d_k + zeta)`.
//!
//! Truncation caps every constraint at the trust-region boundary, which makes
//! the combined direction invariant to per-constraint gradient scale. The QP
//! is solved in its `K`-dimensional dual (`min 1/2 mu'S mu - c'mu`, `mu >= 0`,
//! `S = G H^{-1} G'`) by accelerated projected gradient with restarts, and
//! the parameter update clips the step to the trust region:
//! `psi' = psi + min(1, sqrt(2 eps / g*'Hg*)) g*`.

use crate::error::{Error, Result};
use crate::numgrad::ParamVector;
use crate::vecmath::{axpy, dot};

pub const DUAL_ITERATION_CAP: usize = 10_000;
pub const DUAL_KKT_TOL: f64 = 1e-8;

/// Recovery subproblem data. `hvp` applies `(H + damping I)`.
pub struct RecoveryProblem<'a> {
    pub constraint_grads: Vec<ParamVector>,
    /// Current constraint values `F_k`.
    pub values: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub zeta: f64,
    pub epsilon: f64,
    pub hvp: &'a dyn Fn(&ParamVector) -> Result<ParamVector>,
}

/// Precomputed `H^{-1} g_k`, the Gram matrix `S_ij = g_i'H^{-1}g_j`, and the
/// whitened norms `|g_k|_{H^{-1}}`.
pub struct RecoveryKernel {
    pub hinv_g: Vec<ParamVector>,
    pub s: Vec<f64>,
    pub gbar_norms: Vec<f64>,
}

impl RecoveryKernel {
    pub fn compute(p: &RecoveryProblem, cg_iters: usize, cg_tol: f64) -> Result<Self> {
        let k = p.constraint_grads.len();
        let mut hinv_g = Vec::with_capacity(k);
        for g in &p.constraint_grads {
            let (hg, _) = crate::trsolver::cg_solve(p.hvp, g, cg_iters, cg_tol)?;
            hinv_g.push(hg);
        }
        let mut s = vec![0.0; k * k];
        let mut gbar_norms = vec![0.0; k];
        for i in 0..k {
            for j in 0..k {
                s[i * k + j] = dot(p.constraint_grads[i].as_slice(), hinv_g[j].as_slice());
            }
            gbar_norms[i] = s[i * k + i].max(0.0).sqrt();
        }
        Ok(Self {
            hinv_g,
            s,
            gbar_norms,
        })
    }
}

/// Truncated thresholds `c_k = min(sqrt(2 eps) |g_k|_{H^{-1}}, F_k - d_k + zeta)`.
pub fn truncated_thresholds(p: &RecoveryProblem, kernel: &RecoveryKernel) -> Vec<f64> {
    let root = (2.0 * p.epsilon).sqrt();
    (0..p.constraint_grads.len())
        .map(|k| (root * kernel.gbar_norms[k]).min(p.values[k] - p.thresholds[k] + p.zeta))
        .collect()
}

/// Solves the recovery QP and returns the unclipped direction `g*`.
pub fn recovery_direction(p: &RecoveryProblem) -> Result<ParamVector> {
    let kernel = RecoveryKernel::compute(
        p,
        crate::trsolver::DEFAULT_CG_ITERS,
        crate::trsolver::DEFAULT_CG_TOL,
    )?;
    Ok(recovery_direction_with_kernel(p, &kernel)?.0)
}

/// Direction plus the dual multipliers of the recovery QP.
pub fn recovery_direction_with_kernel(
    p: &RecoveryProblem,
    kernel: &RecoveryKernel,
) -> Result<(ParamVector, Vec<f64>)> {
    let k = p.constraint_grads.len();
    if k == 0 {
        return Err(Error::EmptyInput("recovery_direction"));
    }
    let n = p.constraint_grads[0].len();
    let c = truncated_thresholds(p, kernel);
    if c.iter().all(|&ck| ck <= 0.0) {
        // Zero is feasible for the QP and trivially optimal.
        return Ok((ParamVector::zeros(n), vec![0.0; k]));
    }
    let mu = solve_dual_qp(&kernel.s, &c, k)?;
    // g* = -H^{-1} G' mu
    let mut direction = vec![0.0; n];
    for i in 0..k {
        axpy(-mu[i], kernel.hinv_g[i].as_slice(), &mut direction);
    }
    if !crate::vecmath::all_finite(&direction) {
        return Err(Error::NonFinite("recovery_direction"));
    }
    // KKT feasibility of the active constraints at the primal solution.
    let scale = c.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..k {
        let resid = dot(p.constraint_grads[i].as_slice(), &direction) + c[i];
        if resid > 1e-5 * scale {
            return Err(Error::solver(
                "recovery_direction",
                format!("constraint {i} residual {resid} after dual convergence"),
            ));
        }
    }
    Ok((ParamVector(direction), mu))
}

/// `min 1/2 mu'S mu - c'mu` over `mu >= 0` by accelerated projected gradient
/// with restarts.
fn solve_dual_qp(s: &[f64], c: &[f64], k: usize) -> Result<Vec<f64>> {
    let lipschitz = (0..k)
        .map(|i| s[i * k..(i + 1) * k].iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0f64, f64::max)
        .max(1e-300);
    let step = 1.0 / lipschitz;
    let scale = c
        .iter()
        .fold(1.0f64, |m, v| m.max(v.abs()))
        .max((0..k).map(|i| s[i * k + i]).fold(0.0, f64::max));
    let grad = |mu: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| dot(&s[i * k..(i + 1) * k], mu) - c[i])
            .collect()
    };
    let value = |mu: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..k {
            acc += 0.5 * mu[i] * dot(&s[i * k..(i + 1) * k], mu) - c[i] * mu[i];
        }
        acc
    };
    let kkt_residual = |mu: &[f64], g: &[f64]| -> f64 {
        mu.iter()
            .zip(g)
            .map(|(&m, &gi)| if m > 0.0 { gi.abs() } else { (-gi).max(0.0) })
            .fold(0.0, f64::max)
    };
    // Exact solve on the support identified by the iterate: S_A mu_A = c_A.
    // Returns the polished point when it satisfies the full KKT system.
    let polish = |mu: &[f64]| -> Option<Vec<f64>> {
        let mu_max = mu.iter().fold(0.0f64, |m, &v| m.max(v));
        let active: Vec<usize> = (0..k)
            .filter(|&i| mu[i] > 1e-10 * mu_max.max(1e-300))
            .collect();
        if active.is_empty() {
            let out = vec![0.0; k];
            let g = grad(&out);
            return (kkt_residual(&out, &g) <= DUAL_KKT_TOL * scale).then_some(out);
        }
        let m = active.len();
        let mut s_a = vec![0.0; m * m];
        let mut c_a = vec![0.0; m];
        for (ai, &i) in active.iter().enumerate() {
            c_a[ai] = c[i];
            for (aj, &j) in active.iter().enumerate() {
                s_a[ai * m + aj] = s[i * k + j];
            }
        }
        let sol = crate::vecmath::solve_dense(s_a, c_a)?;
        if sol.iter().any(|&v| v < 0.0) {
            return None;
        }
        let mut out = vec![0.0; k];
        for (ai, &i) in active.iter().enumerate() {
            out[i] = sol[ai];
        }
        let g = grad(&out);
        (kkt_residual(&out, &g) <= DUAL_KKT_TOL * scale).then_some(out)
    };

    let mut mu = vec![0.0; k];
    let mut y = mu.clone();
    let mut t: f64 = 1.0;
    let mut prev_value = value(&mu);
    for iter in 0..DUAL_ITERATION_CAP {
        let g = grad(&y);
        let next: Vec<f64> = y
            .iter()
            .zip(&g)
            .map(|(&yi, &gi)| (yi - step * gi).max(0.0))
            .collect();
        let next_value = value(&next);
        if next_value > prev_value {
            // Restart the momentum sequence.
            y = mu.clone();
            t = 1.0;
            prev_value = value(&mu);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            y = next
                .iter()
                .zip(&mu)
                .map(|(&a, &b)| a + momentum * (a - b))
                .collect();
            mu = next;
            t = t_next;
            prev_value = next_value;
        }
        let g = grad(&mu);
        if kkt_residual(&mu, &g) <= DUAL_KKT_TOL * scale {
            return Ok(mu);
        }
        if iter % 32 == 31 {
            if let Some(polished) = polish(&mu) {
                return Ok(polished);
            }
        }
    }
    if let Some(polished) = polish(&mu) {
        return Ok(polished);
    }
    let g = grad(&mu);
    let resid = kkt_residual(&mu, &g);
    Err(Error::solver(
        "recovery dual QP",
        format!(
            "no convergence within {DUAL_ITERATION_CAP} iterations; KKT residual {resid}, \
             K = {k}"
        ),
    ))
}

/// Clipped update `psi + min(1, sqrt(2 eps / g'Hg)) g`.
pub fn clipped_step(
    params: &ParamVector,
    direction: &ParamVector,
    hvp: &dyn Fn(&ParamVector) -> Result<ParamVector>,
    epsilon: f64,
) -> Result<(ParamVector, f64)> {
    let hd = hvp(direction)?;
    let quad = dot(direction.as_slice(), hd.as_slice());
    if quad <= 1e-12 {
        return Ok((params.clone(), 0.0));
    }
    let factor = (2.0 * epsilon / quad).sqrt().min(1.0);
    let mut out = params.as_slice().to_vec();
    axpy(factor, direction.as_slice(), &mut out);
    // Model KL of the clipped step.
    let model_kl = 0.5 * factor * factor * quad;
    debug_assert!(model_kl <= epsilon * (1.0 + 1e-9));
    Ok((ParamVector(out), model_kl))
}

/// One full recovery step: direction QP plus the clipped update.
pub fn recovery_step(params: &ParamVector, p: &RecoveryProblem) -> Result<(ParamVector, f64)> {
    let direction = recovery_direction(p)?;
    clipped_step(params, &direction, p.hvp, p.epsilon)
}

// --- convex test problems -----------------------------------------------------

/// A differentiable convex multi-constraint problem with oracle gradients,
/// used by the recovery-iteration studies. The trust-region metric is the
/// identity.
pub trait ConvexConstraintProblem {
    fn dim(&self) -> usize;
    fn constraint_values(&self, x: &[f64]) -> Vec<f64>;
    fn constraint_grads(&self, x: &[f64]) -> Vec<Vec<f64>>;
    fn thresholds(&self) -> Vec<f64>;
    /// Objective used only for reporting and plots.
    fn objective(&self, x: &[f64]) -> f64;
}

/// The two-constraint planar toy: minimize
/// `sqrt((sqrt(3) x1 + x2 + 2)^2 + 4 (x1 - sqrt(3) x2 + 4)^2)` subject to
/// `x1 >= 0` and `x1 - 2 x2 <= 0`.
pub struct PlanarToy;

impl ConvexConstraintProblem for PlanarToy {
    fn dim(&self) -> usize {
        2
    }

    fn constraint_values(&self, x: &[f64]) -> Vec<f64> {
        vec![-x[0], x[0] - 2.0 * x[1]]
    }

    fn constraint_grads(&self, _x: &[f64]) -> Vec<Vec<f64>> {
        vec![vec![-1.0, 0.0], vec![1.0, -2.0]]
    }

    fn thresholds(&self) -> Vec<f64> {
        vec![0.0, 0.0]
    }

    fn objective(&self, x: &[f64]) -> f64 {
        let s3 = 3.0f64.sqrt();
        let a = s3 * x[0] + x[1] + 2.0;
        let b = x[0] - s3 * x[1] + 4.0;
        (a * a + 4.0 * b * b).sqrt()
    }
}

/// One point of a recovery trace.
#[derive(Debug, Clone)]
pub struct TracePoint {
    pub iter: usize,
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub objective: f64,
    pub feasible: bool,
}

fn trace_point(
    problem: &dyn ConvexConstraintProblem,
    iter: usize,
    x: &[f64],
) -> TracePoint {
    let values = problem.constraint_values(x);
    let feasible = values
        .iter()
        .zip(problem.thresholds())
        .all(|(&f, d)| f <= d);
    TracePoint {
        iter,
        x: x.to_vec(),
        values,
        objective: problem.objective(x),
        feasible,
    }
}

fn identity_hvp(v: &ParamVector) -> Result<ParamVector> {
    Ok(v.clone())
}

/// Iterates the recovery step on a convex problem until all constraints are
/// satisfied or `max_iters` is reached; returns the full trace including the
/// start point.
pub fn recover_until_feasible(
    problem: &dyn ConvexConstraintProblem,
    start: &[f64],
    epsilon: f64,
    zeta: f64,
    max_iters: usize,
) -> Result<Vec<TracePoint>> {
    let mut x = start.to_vec();
    let mut trace = vec![trace_point(problem, 0, &x)];
    for iter in 1..=max_iters {
        if trace.last().expect("nonempty").feasible {
            break;
        }
        let grads = problem.constraint_grads(&x);
        let p = RecoveryProblem {
            constraint_grads: grads.into_iter().map(ParamVector).collect(),
            values: problem.constraint_values(&x),
            thresholds: problem.thresholds(),
            zeta,
            epsilon,
            hvp: &identity_hvp,
        };
        let (next, _kl) = recovery_step(&ParamVector(x.clone()), &p)?;
        x = next.0;
        trace.push(trace_point(problem, iter, &x));
    }
    Ok(trace)
}

/// The sequential baseline: pick the first violated constraint and descend
/// its gradient with a full trust-region step.
pub fn naive_until_feasible(
    problem: &dyn ConvexConstraintProblem,
    start: &[f64],
    epsilon: f64,
    max_iters: usize,
) -> Result<Vec<TracePoint>> {
    let mut x = start.to_vec();
    let mut trace = vec![trace_point(problem, 0, &x)];
    for iter in 1..=max_iters {
        let values = problem.constraint_values(&x);
        let thresholds = problem.thresholds();
        let Some(k) = values
            .iter()
            .zip(&thresholds)
            .position(|(&f, &d)| f > d)
        else {
            break;
        };
        let grads = problem.constraint_grads(&x);
        let g = &grads[k];
        let norm_sq = dot(g, g);
        if norm_sq <= 1e-300 {
            break;
        }
        let scale = (2.0 * epsilon / norm_sq).sqrt();
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi -= scale * gi;
        }
        trace.push(trace_point(problem, iter, &x));
    }
    Ok(trace)
}
