//! Primal-dual logarithmic-barrier Fisher scoring.
//!
//! Solves `min f(θ)` subject to `g_j(θ) ≤ 0` by following the central path of the merit
//! `φ_μ(θ) = f(θ) − μ·Σ ln(−g_j(θ))` for a geometrically decreasing `μ`. Each inner step
//! solves `I·Δ = −∇φ_μ` where `I` is the caller's (regularized) information matrix plus
//! the barrier curvature `Aᵀ·diag(λ/ν)·A`, then backtracks until the iterate is strictly
//! feasible and the merit has not increased. Multipliers follow the linearized
//! complementarity update `λ ← λ + β·(λ/ν)∘(A·Δ + g + μ/λ)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A smooth objective with smooth inequality constraints `g_j(θ) ≤ 0`.
pub trait BarrierProblem {
    fn dim(&self) -> usize;
    fn n_constraints(&self) -> usize;
    fn objective(&self, theta: &DVector<f64>) -> f64;
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;
    /// Information matrix including `Σ λ_j ∇²g_j(θ)`.
    fn information(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64>;
    fn constraints(&self, theta: &DVector<f64>) -> DVector<f64>;
    /// Rows are `∇g_j(θ)ᵀ`.
    fn constraint_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub mu0: f64,
    pub mu_shrink: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Tolerance on `‖∇φ_μ‖∞` ending an inner loop.
    pub grad_tol: f64,
    /// Barrier parameter times constraint count below which the outer loop stops.
    pub constraint_tol: f64,
    pub step_shrink: f64,
    pub min_step: f64,
    /// An inner loop also ends once the predicted merit decrease `−∇φ·Δ` falls below
    /// `max(decrement_tol·min(μ, 1), 1e-14·|φ|)`. Scaling with `μ` keeps `λ = μ/ν`
    /// accurate as the iterates approach active constraints.
    pub decrement_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            mu0: 1.0,
            mu_shrink: 0.2,
            max_outer: 30,
            max_inner: 50,
            grad_tol: 1e-6,
            constraint_tol: 1e-10,
            step_shrink: 0.5,
            min_step: 1e-12,
            decrement_tol: 1e-10,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), OptimError> {
        let positive = [self.mu0, self.grad_tol, self.constraint_tol, self.min_step, self.decrement_tol];
        let shrink_ok = |s: f64| s > 0.0 && s < 1.0;
        if positive.iter().all(|&x| x > 0.0 && x.is_finite())
            && shrink_ok(self.mu_shrink)
            && shrink_ok(self.step_shrink)
            && self.max_outer > 0
            && self.max_inner > 0
        {
            Ok(())
        } else {
            Err(OptimError::InvalidOptions)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub nu: DVector<f64>,
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_mu: f64,
    /// `f(θ)` after every accepted step.
    pub objective_trace: Vec<f64>,
    /// `μ` at the start of each outer iteration.
    pub mu_trace: Vec<f64>,
    pub complementarity: f64,
    pub score_norm: f64,
    /// True when some line search hit the minimum step.
    pub stalled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub theta: DVector<f64>,
    pub lambda: DVector<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("starting point violates constraint {index} (g = {value})")]
    Infeasible { index: usize, value: f64 },
    #[error("step length fell below the minimum before any progress")]
    NonConvergence { best: Box<Solution> },
    #[error("solver options must be positive with shrink factors in (0, 1)")]
    InvalidOptions,
    #[error("non-finite objective or gradient")]
    NonFinite,
}

/// `H + s·I`, then further multiples of `max(s, 1e-8)` (growing tenfold) until the result
/// admits a Cholesky factorization.
pub fn regularize(h: &DMatrix<f64>, score_norm: f64) -> DMatrix<f64> {
    let d = h.nrows();
    let sym = (h + h.transpose()) * 0.5;
    let mut out = &sym + DMatrix::identity(d, d) * score_norm;
    let base = score_norm.max(1e-8);
    let mut add = base;
    while Cholesky::new(out.clone()).is_none() {
        out = &sym + DMatrix::identity(d, d) * (score_norm + add);
        add *= 10.0;
        if !add.is_finite() {
            break;
        }
    }
    out
}

/// Solves `I·Δ = score` for symmetric positive definite `I`; `None` if factorization fails.
pub fn fisher_step(info: &DMatrix<f64>, score: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(info.clone()).map(|c| c.solve(score))
}

fn merit<P: BarrierProblem + ?Sized>(problem: &P, theta: &DVector<f64>, mu: f64) -> Option<(f64, DVector<f64>)> {
    let g = problem.constraints(theta);
    if g.iter().any(|&x| !(x < 0.0)) {
        return None;
    }
    let f = problem.objective(theta);
    if !f.is_finite() {
        return None;
    }
    let barrier: f64 = g.iter().map(|&x| (-x).ln()).sum();
    Some((f - mu * barrier, g))
}

pub fn solve<P: BarrierProblem + ?Sized>(
    problem: &P,
    theta0: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<Solution, OptimError> {
    opts.validate()?;
    let m = problem.n_constraints();
    let g0 = problem.constraints(theta0);
    if let Some((index, &value)) = g0.iter().enumerate().find(|(_, &x)| !(x < 0.0)) {
        return Err(OptimError::Infeasible { index, value });
    }
    if !problem.objective(theta0).is_finite() {
        return Err(OptimError::NonFinite);
    }

    let mut state = SolverState {
        theta: theta0.clone(),
        nu: -&g0,
        lambda: g0.map(|x| opts.mu0 / -x),
        mu: opts.mu0,
        alpha: 1.0,
        beta: 1.0,
    };
    let mut diag = Diagnostics::default();
    diag.objective_trace.push(problem.objective(theta0));
    let mut any_progress = false;

    for _outer in 0..opts.max_outer {
        diag.outer_iterations += 1;
        diag.mu_trace.push(state.mu);
        for _inner in 0..opts.max_inner {
            let g = problem.constraints(&state.theta);
            let nu = -&g;
            let a = problem.constraint_jacobian(&state.theta);
            let grad = problem.gradient(&state.theta);
            if grad.iter().any(|x| !x.is_finite()) {
                return Err(OptimError::NonFinite);
            }
            let barrier_grad = if m > 0 {
                a.transpose() * nu.map(|x| state.mu / x)
            } else {
                DVector::zeros(problem.dim())
            };
            let merit_grad = &grad + barrier_grad;
            if merit_grad.amax() <= opts.grad_tol {
                break;
            }
            diag.inner_iterations += 1;

            let score = if m > 0 { &grad + a.transpose() * &state.lambda } else { grad.clone() };
            let mut info = regularize(&problem.information(&state.theta, &state.lambda), score.norm());
            if m > 0 {
                let w = state.lambda.component_div(&nu);
                let mut aw = a.clone();
                for (mut row, wj) in aw.row_iter_mut().zip(w.iter()) {
                    row *= *wj;
                }
                info += a.transpose() * aw;
            }
            let step = match fisher_step(&info, &(-&merit_grad)) {
                Some(s) => s,
                None => {
                    let info = regularize(&info, merit_grad.norm());
                    fisher_step(&info, &(-&merit_grad)).ok_or(OptimError::NonFinite)?
                }
            };

            let (phi0, _) = merit(problem, &state.theta, state.mu).ok_or(OptimError::NonFinite)?;
            let decrement_tol = if m > 0 { opts.decrement_tol * state.mu.min(1.0) } else { opts.decrement_tol };
            if -merit_grad.dot(&step) <= decrement_tol.max(1e-14 * phi0.abs()) {
                break;
            }
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha >= opts.min_step {
                let trial = &state.theta + &step * alpha;
                if let Some((phi, g_new)) = merit(problem, &trial, state.mu) {
                    if phi <= phi0 {
                        accepted = Some((trial, g_new, phi0 - phi));
                        break;
                    }
                }
                alpha *= opts.step_shrink;
            }
            let Some((theta_new, g_new, decrease)) = accepted else {
                diag.stalled = true;
                break;
            };
            // no decrease beyond rounding: the merit is flat at working precision
            let flat = decrease <= 4.0 * f64::EPSILON * phi0.abs().max(1.0);
            any_progress = true;

            if m > 0 {
                let a_step = &a * (&step * alpha);
                let direction = DVector::from_fn(m, |j, _| {
                    state.lambda[j] / nu[j] * (a_step[j] + g[j] + state.mu / state.lambda[j])
                });
                let mut beta = 1.0;
                let mut lambda_new = &state.lambda + &direction * beta;
                while lambda_new.iter().any(|&x| !(x > 0.0)) && beta >= opts.min_step {
                    beta *= opts.step_shrink;
                    lambda_new = &state.lambda + &direction * beta;
                }
                if lambda_new.iter().all(|&x| x > 0.0) {
                    state.lambda = lambda_new;
                }
                state.beta = beta;
            }
            state.alpha = alpha;
            state.theta = theta_new;
            state.nu = -g_new;
            diag.objective_trace.push(problem.objective(&state.theta));
            if flat {
                break;
            }
        }
        if m > 0 {
            // recentre the multipliers at the stationary point: the dual update with Δ = 0
            state.lambda = state.nu.map(|x| state.mu / x);
        }
        if state.mu * (m.max(1) as f64) <= opts.constraint_tol || m == 0 {
            break;
        }
        state.mu *= opts.mu_shrink;
    }

    diag.final_mu = state.mu;
    diag.complementarity = state.lambda.dot(&state.nu);
    let grad = problem.gradient(&state.theta);
    let score = if m > 0 {
        grad + problem.constraint_jacobian(&state.theta).transpose() * &state.lambda
    } else {
        grad
    };
    diag.score_norm = score.amax();
    let solution = Solution {
        theta: state.theta,
        lambda: state.lambda,
        diagnostics: diag,
    };
    if !any_progress && solution.diagnostics.stalled {
        return Err(OptimError::NonConvergence {
            best: Box::new(solution),
        });
    }
    Ok(solution)
}
