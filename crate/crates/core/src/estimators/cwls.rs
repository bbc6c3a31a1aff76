//! Constrained weighted linear least squares on the log signal.

use std::time::Instant;

use super::em::alternate_blocks;
use super::problems::{Criterion, CwlsLProblem, SubproblemData};
use super::{init_params, wls_fit, EstimatorError, EstimatorKind, FitOptions, FitResult, VoxelData};

/// Minimizes `½Σ w_j r_j²` with `w_j = Y_j²/S0²` over `(L, θ_Q)` under the three
/// constraints, with `S0` and `σ²` fixed at their WLS values.
pub fn cwls_fit(data: &VoxelData, design: &crate::protocol::DesignMatrices, opts: &FitOptions) -> Result<FitResult, EstimatorError> {
    let started = Instant::now();
    data.check(design)?;
    let wls = wls_fit(data, design, opts.weights)?;
    let mut params = init_params(&wls, design);
    let sub = SubproblemData::new(design, &data.y, params.s0, params.sigma2);
    let mut trace = Vec::new();
    {
        use crate::optimizer::BarrierProblem;
        let p = CwlsLProblem {
            data: &sub,
            theta_q: params.theta_q.0,
        };
        trace.push(-p.objective(&nalgebra::DVector::from_column_slice(params.l.0.as_slice())));
    }
    let cycles = alternate_blocks(
        &mut params,
        &sub,
        Criterion::Cwls,
        &opts.solver,
        opts.cwls_max_cycles,
        opts.cwls_tol,
        |f| trace.push(-f),
    );
    let mut result = FitResult::from_params(EstimatorKind::Cwls, params, design, started);
    result.converged = cycles < opts.cwls_max_cycles;
    result.loglik_trace = trace;
    result.em_iterations = cycles;
    result.wall_time_s = started.elapsed().as_secs_f64();
    Ok(result)
}
