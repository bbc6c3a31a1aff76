//! EM maximum likelihood under the Rician model, with the phase as the missing datum.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::problems::{Criterion, EmLProblem, EmQProblem, EmScaledProblem, JointProblem, SubproblemData};
use super::{init_params, wls_fit, EstimatorError, EstimatorKind, FitOptions, FitResult, VoxelData};
use crate::linalg::{Vec18, Vec6};
use crate::optimizer::{solve, BarrierProblem, SolverOptions};
use crate::protocol::{apply_p, DesignMatrices};
use crate::rician::{joint_loglik_with_count, observed_loglik, AugmentedState};
use crate::tensor::{CholeskyParams, KurtosisQ, ModelParams};

/// Floor applied when the σ² update is not positive.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmOptions {
    /// Relative change of `(S0, σ²)` ending the E/S0/σ² inner loop.
    pub tol_inner: f64,
    /// Relative change of the monitored log-likelihood ending the EM loop.
    pub tol_outer: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Maximum `L`/`θ_Q` alternations within one sweep.
    pub block_cycles: usize,
    /// Relative objective decrease below which the alternation stops.
    pub block_tol: f64,
    /// Finish each M-step with a joint update of `(S0, L, θ_Q)`.
    pub joint_scale: bool,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            tol_inner: 1e-6,
            tol_outer: 1e-6,
            max_outer: 50,
            max_inner: 100,
            block_cycles: 20,
            block_tol: 1e-9,
            joint_scale: true,
        }
    }
}

/// `ζ_jψ_j = exp(Z_Djθ_D + θ_QᵀP_jθ_Q)` for every row.
fn attenuation(params: &ModelParams, design: &DesignMatrices) -> DVector<f64> {
    let theta_d = params.theta_d().0;
    DVector::from_fn(design.len(), |j, _| {
        (design.z_d_row(j).dot(&theta_d) + apply_p(&params.theta_q.0, &design.v[j], design.b[j])).exp()
    })
}

/// `⟨cos φ_j⟩ = I1/I0(Y_j S0 ζ_jψ_j/σ²)`.
pub fn em_estep(params: &ModelParams, data: &VoxelData, design: &DesignMatrices) -> AugmentedState {
    let e = attenuation(params, design);
    AugmentedState::from_arguments((0..data.len()).map(|j| data.y[j] * params.s0 * e[j] / params.sigma2))
}

/// `S0' = Σ τ_jζ_jψ_j / Σ ζ_j²ψ_j²` with `τ_j = Y_j⟨cos φ_j⟩`.
pub fn em_mstep_s0(
    state: &AugmentedState,
    params: &ModelParams,
    data: &VoxelData,
    design: &DesignMatrices,
) -> Result<f64, EstimatorError> {
    let e = attenuation(params, design);
    let num: f64 = (0..data.len()).map(|j| data.y[j] * state.cos_phi[j] * e[j]).sum();
    let den: f64 = e.iter().map(|x| x * x).sum();
    if !(den > 0.0) || !den.is_finite() {
        return Err(EstimatorError::Degenerate("signal attenuation vanished at every acquisition"));
    }
    Ok(num / den)
}

/// `σ²' = Σ_j {Y_j² + S_j² − 2τ_jS_j} / (2(m − 1))`, floored at [`SIGMA2_FLOOR`].
pub fn em_mstep_sigma2(state: &AugmentedState, params: &ModelParams, data: &VoxelData, design: &DesignMatrices) -> f64 {
    let e = attenuation(params, design);
    let r: f64 = (0..data.len())
        .map(|j| {
            let (y, s) = (data.y[j], params.s0 * e[j]);
            (y - s).powi(2) + 2.0 * y * s * state.one_minus_cos_phi[j]
        })
        .sum();
    let s2 = r / (2.0 * dof(data.len()));
    if s2 > 0.0 {
        s2
    } else {
        SIGMA2_FLOOR
    }
}

fn dof(m: usize) -> f64 {
    (m as f64 - 1.0).max(1.0)
}

fn dvec(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// Runs one constrained block update and keeps the result only if the objective did not
/// increase. Returns the accepted point and its objective.
pub(crate) fn guarded_update(problem: &dyn BarrierProblem, start: &[f64], solver: &SolverOptions) -> (DVector<f64>, f64) {
    let x0 = dvec(start);
    let f0 = problem.objective(&x0);
    match solve(problem, &x0, solver) {
        Ok(sol) => {
            let f = problem.objective(&sol.theta);
            let feasible = problem.constraints(&sol.theta).iter().all(|&g| g < 0.0);
            if f <= f0 && feasible {
                (sol.theta, f)
            } else {
                (x0, f0)
            }
        }
        Err(_) => (x0, f0),
    }
}

/// Constrained Fisher-scoring update of `L` with `θ_Q`, `S0`, `σ²` and the E-step fixed.
pub fn update_l(
    params: &ModelParams,
    state: &AugmentedState,
    data: &VoxelData,
    design: &DesignMatrices,
    solver: &SolverOptions,
) -> Result<CholeskyParams, EstimatorError> {
    data.check(design)?;
    let sub = SubproblemData::new(design, &data.y, params.s0, params.sigma2)
        .with_state(&state.cos_phi, &state.one_minus_cos_phi);
    let problem = EmLProblem {
        data: &sub,
        theta_q: params.theta_q.0,
    };
    let (x, _) = guarded_update(&problem, params.l.0.as_slice(), solver);
    Ok(CholeskyParams(Vec6::from_iterator(x.iter().copied())))
}

/// Constrained scoring update of `θ_Q` with `L`, `S0`, `σ²` and the E-step fixed.
pub fn update_theta_q(
    params: &ModelParams,
    state: &AugmentedState,
    data: &VoxelData,
    design: &DesignMatrices,
    solver: &SolverOptions,
) -> Result<KurtosisQ, EstimatorError> {
    data.check(design)?;
    let sub = SubproblemData::new(design, &data.y, params.s0, params.sigma2)
        .with_state(&state.cos_phi, &state.one_minus_cos_phi);
    let problem = EmQProblem { data: &sub, l: params.l.0 };
    let (x, _) = guarded_update(&problem, params.theta_q.0.as_slice(), solver);
    Ok(KurtosisQ(Vec18::from_iterator(x.iter().copied())))
}

/// Block updates of `L` then `θ_Q`, each followed by a joint `(L, θ_Q)` scoring step that
/// resolves the coupling between the two blocks, repeated until the objective settles.
/// Returns the number of cycles.
pub(crate) fn alternate_blocks(
    params: &mut ModelParams,
    sub: &SubproblemData,
    criterion: Criterion,
    solver: &SolverOptions,
    max_cycles: usize,
    tol: f64,
    mut on_cycle: impl FnMut(f64),
) -> usize {
    let joint = JointProblem { data: sub, criterion };
    let stacked = |p: &ModelParams| -> Vec<f64> { p.l.0.iter().chain(p.theta_q.0.iter()).copied().collect() };
    let mut f_prev = joint.objective(&dvec(&stacked(params)));
    let mut cycles = 0;
    for _ in 0..max_cycles {
        cycles += 1;
        let (pl, _) = joint.blocks(&params.l.0, &params.theta_q.0);
        let (l, _) = guarded_update(pl.as_ref(), params.l.0.as_slice(), solver);
        params.l = CholeskyParams(Vec6::from_iterator(l.iter().copied()));
        let (_, pq) = joint.blocks(&params.l.0, &params.theta_q.0);
        let (q, _) = guarded_update(pq.as_ref(), params.theta_q.0.as_slice(), solver);
        params.theta_q = KurtosisQ(Vec18::from_iterator(q.iter().copied()));
        let (x, f) = guarded_update(&joint, &stacked(params), solver);
        params.l = CholeskyParams(Vec6::from_iterator(x.rows(0, 6).iter().copied()));
        params.theta_q = KurtosisQ(Vec18::from_iterator(x.rows(6, 18).iter().copied()));
        on_cycle(f);
        let decrease = f_prev - f;
        f_prev = f;
        if decrease <= tol * f.abs().max(1.0) {
            break;
        }
    }
    cycles
}

/// Observed Rician log-likelihood plus `ln σ²`: the function whose ascent the EM with the
/// `2(m − 1)` variance update guarantees.
pub fn penalized_loglik(params: &ModelParams, data: &VoxelData, design: &DesignMatrices) -> Result<f64, EstimatorError> {
    Ok(observed_loglik(params, data, design)? + params.sigma2.ln())
}

fn relative_change(new: f64, old: f64) -> f64 {
    (new - old).abs() / old.abs().max(f64::MIN_POSITIVE)
}

/// WLS start, then EM sweeps until the monitored log-likelihood settles.
pub fn em_mle_fit(data: &VoxelData, design: &DesignMatrices, opts: &FitOptions) -> Result<FitResult, EstimatorError> {
    let started = Instant::now();
    data.check(design)?;
    let wls = wls_fit(data, design, opts.weights)?;
    em_mle_from(init_params(&wls, design), data, design, opts, started)
}

/// EM sweeps from a given strictly feasible start.
pub fn em_mle_from(
    init: ModelParams,
    data: &VoxelData,
    design: &DesignMatrices,
    opts: &FitOptions,
    started: Instant,
) -> Result<FitResult, EstimatorError> {
    let em = &opts.em;
    let count = dof(data.len());
    let mut params = init;
    let mut trace = vec![penalized_loglik(&params, data, design)?];
    let mut gains = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;

    for _ in 0..em.max_outer {
        sweeps += 1;
        let mut state;
        let mut q_before;
        let mut inner = 0;
        loop {
            state = em_estep(&params, data, design);
            q_before = joint_loglik_with_count(&params, data, design, &state, count)?;
            let s0 = em_mstep_s0(&state, &params, data, design)?;
            let ds0 = relative_change(s0, params.s0);
            params.s0 = s0;
            let s2 = em_mstep_sigma2(&state, &params, data, design);
            let ds2 = relative_change(s2, params.sigma2);
            params.sigma2 = s2;
            inner += 1;
            if (ds0 < em.tol_inner && ds2 < em.tol_inner) || inner >= em.max_inner {
                break;
            }
        }

        let sub = SubproblemData::new(design, &data.y, params.s0, params.sigma2)
            .with_state(&state.cos_phi, &state.one_minus_cos_phi);
        alternate_blocks(
            &mut params,
            &sub,
            Criterion::Em,
            &opts.solver,
            em.block_cycles,
            em.block_tol,
            |_| {},
        );
        if em.joint_scale {
            let scaled = EmScaledProblem { data: &sub };
            let start: Vec<f64> =
                std::iter::once(params.s0.ln()).chain(params.l.0.iter().copied()).chain(params.theta_q.0.iter().copied()).collect();
            let (x, _) = guarded_update(&scaled, &start, &opts.solver);
            params.s0 = x[0].exp();
            params.l = CholeskyParams(Vec6::from_iterator(x.rows(1, 6).iter().copied()));
            params.theta_q = KurtosisQ(Vec18::from_iterator(x.rows(7, 18).iter().copied()));
        }

        let q_after = joint_loglik_with_count(&params, data, design, &state, count)?;
        gains.push(q_after - q_before);
        let ll = penalized_loglik(&params, data, design)?;
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(ll);
        if (ll - prev).abs() <= em.tol_outer * ll.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let mut result = FitResult::from_params(EstimatorKind::Mle, params, design, started);
    result.loglik_trace = trace;
    result.surrogate_gains = gains;
    result.em_iterations = sweeps;
    result.converged = converged;
    result.wall_time_s = started.elapsed().as_secs_f64();
    Ok(result)
}
