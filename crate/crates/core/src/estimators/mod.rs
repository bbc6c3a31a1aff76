//! WLS, constrained WLS and EM maximum-likelihood fitting of one voxel.

mod cwls;
mod em;
mod init;
mod problems;
mod wls;

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{min_eigenvalue3, Vec18};
use crate::metrics::fibonacci_sphere;
use crate::optimizer::{OptimError, SolverOptions};
use crate::protocol::{block_projections, DesignMatrices};
use crate::rician::RicianError;
use crate::tensor::{DiffusionTensor, KurtosisTensor, ModelParams};

pub use cwls::cwls_fit;
pub use em::{
    em_estep, em_mle_fit, em_mle_from, em_mstep_s0, em_mstep_sigma2, penalized_loglik, update_l, update_theta_q,
    EmOptions, SIGMA2_FLOOR,
};
pub use init::{init_params, rank3_representation, INIT_FEASIBILITY_MARGIN};
pub use problems::{
    constraint_curvature_l, constraint_values, Criterion, CwlsLProblem, CwlsQProblem, EmLProblem, EmQProblem, JointProblem,
    SubproblemData,
};
pub use wls::{wls_fit, WeightMode, WlsOutput, WLS_PARAMETERS};

/// Tolerances used when flagging constraint violations on fitted parameters.
pub const VIOLATION_TOL_EIG: f64 = 0.0;
pub const VIOLATION_TOL_QUARTIC: f64 = 1e-10;
pub const VIOLATION_TOL_BOUND: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("magnitudes must be finite and non-negative (sample {index} is {value})")]
    InvalidMagnitude { index: usize, value: f64 },
    #[error("voxel has {data} samples but the protocol has {design}")]
    LengthMismatch { data: usize, design: usize },
    #[error("design matrix has rank {rank}, fewer than the {needed} parameters")]
    RankDeficient { rank: usize, needed: usize },
    #[error("no positive magnitudes to regress on")]
    NoPositiveSamples,
    #[error("degenerate voxel: {0}")]
    Degenerate(&'static str),
    #[error(transparent)]
    Optimizer(#[from] OptimError),
    #[error(transparent)]
    Rician(#[from] RicianError),
}

/// Magnitudes of one voxel, with exact zeros tagged.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelData {
    pub y: DVector<f64>,
    pub zero: Vec<bool>,
}

impl VoxelData {
    pub fn new(y: Vec<f64>) -> Result<Self, EstimatorError> {
        if let Some((index, &value)) = y.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(EstimatorError::InvalidMagnitude { index, value });
        }
        let zero = y.iter().map(|&v| v == 0.0).collect();
        Ok(VoxelData {
            y: DVector::from_vec(y),
            zero,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub(crate) fn check(&self, design: &DesignMatrices) -> Result<(), EstimatorError> {
        if self.len() != design.len() {
            return Err(EstimatorError::LengthMismatch {
                data: self.len(),
                design: design.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Wls,
    Cwls,
    Mle,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Wls, EstimatorKind::Cwls, EstimatorKind::Mle];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Wls => "wls",
            EstimatorKind::Cwls => "cwls",
            EstimatorKind::Mle => "mle",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "wls" => Ok(EstimatorKind::Wls),
            "cwls" => Ok(EstimatorKind::Cwls),
            "mle" | "em" | "em-mle" => Ok(EstimatorKind::Mle),
            other => Err(format!("unknown estimator `{other}` (expected wls, cwls or mle)")),
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Which of the three physical constraints a fit violates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConstraintFlags {
    /// `D` is not positive definite.
    pub d_not_pd: bool,
    /// `K_app < 0` in some direction.
    pub k_negative: bool,
    /// `K_app > 3/(b·D_app)` at some acquisition.
    pub k_above_bound: bool,
}

impl ConstraintFlags {
    pub fn any(&self) -> bool {
        self.d_not_pd || self.k_negative || self.k_above_bound
    }
}

/// Flags for `(θ_D, MD²·W)`. `K_app` signs are checked on the 1000-point sphere lattice and
/// the upper bound at every `b > 0` acquisition.
pub fn constraint_flags(theta_d: &DiffusionTensor, scaled_w: &KurtosisTensor, design: &DesignMatrices) -> ConstraintFlags {
    let d_not_pd = !(min_eigenvalue3(&theta_d.matrix()) > VIOLATION_TOL_EIG);
    let scale = scaled_w.0.amax().max(f64::MIN_POSITIVE);
    let k_negative = fibonacci_sphere(crate::metrics::N_DIR)
        .iter()
        .any(|g| scaled_w.contract(g) < -VIOLATION_TOL_QUARTIC * scale.max(1.0));
    let k_above_bound = design.weighted_rows().into_iter().any(|j| {
        let b = design.b[j];
        let d_app = -design.z_d_row(j).dot(&theta_d.0) / b;
        scaled_w.contract(&design.g[j]) - 3.0 * d_app / b > VIOLATION_TOL_BOUND
    });
    ConstraintFlags {
        d_not_pd,
        k_negative,
        k_above_bound,
    }
}

/// `max_j g_j` over the `b > 0` rows for a parametrized fit (negative when strictly feasible).
pub fn max_constraint(params: &ModelParams, design: &DesignMatrices) -> f64 {
    constraint_values(&params.l.0, &params.theta_q.0, design)
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `vᵀ(QQᵀ)v` for one direction's monomials, i.e. `MD²·W(g)`.
pub fn quartic_value(theta_q: &Vec18, g: &nalgebra::Vector3<f64>) -> f64 {
    let v = crate::protocol::monomials(g);
    block_projections(theta_q, &v).iter().map(|p| p * p).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub weights: WeightMode,
    pub em: EmOptions,
    pub solver: SolverOptions,
    /// Maximum alternations of the `L` and `θ_Q` updates in CWLS.
    pub cwls_max_cycles: usize,
    /// Relative objective decrease below which CWLS alternation stops.
    pub cwls_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            weights: WeightMode::NormalizedSignalSquared,
            em: EmOptions::default(),
            solver: SolverOptions::default(),
            cwls_max_cycles: 50,
            cwls_tol: 1e-10,
        }
    }
}

/// Outcome of one voxel fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    pub theta_d: DiffusionTensor,
    /// Dimensionless kurtosis tensor `W`.
    pub kurtosis: KurtosisTensor,
    /// `MD²·W`, the coefficients of `Z_W`.
    pub scaled_kurtosis: KurtosisTensor,
    pub s0: f64,
    pub sigma2: f64,
    /// Parametrized form; `None` for WLS.
    pub params: Option<ModelParams>,
    /// Penalized observed log-likelihood per EM sweep (MLE) or negated objective per
    /// alternation (CWLS), starting at the initial value.
    pub loglik_trace: Vec<f64>,
    /// Per-sweep increase of the augmented surrogate at the sweep's E-step state.
    pub surrogate_gains: Vec<f64>,
    pub em_iterations: usize,
    pub violations: ConstraintFlags,
    pub converged: bool,
    pub wall_time_s: f64,
}

impl FitResult {
    pub(crate) fn from_params(
        estimator: EstimatorKind,
        params: ModelParams,
        design: &DesignMatrices,
        started: Instant,
    ) -> Self {
        let theta_d = params.theta_d();
        let scaled = KurtosisTensor(params.scaled_kurtosis());
        FitResult {
            estimator,
            theta_d,
            kurtosis: kurtosis_from_scaled(&scaled, &theta_d),
            scaled_kurtosis: scaled,
            s0: params.s0,
            sigma2: params.sigma2,
            params: Some(params),
            loglik_trace: Vec::new(),
            surrogate_gains: Vec::new(),
            em_iterations: 0,
            violations: constraint_flags(&theta_d, &scaled, design),
            converged: true,
            wall_time_s: started.elapsed().as_secs_f64(),
        }
    }

    /// Signal-to-noise ratio `S0/σ`.
    pub fn snr(&self) -> f64 {
        self.s0 / self.sigma2.sqrt()
    }
}

/// `W = θ_W/MD²`, or zero when `MD ≤ 0`.
pub fn kurtosis_from_scaled(scaled: &KurtosisTensor, theta_d: &DiffusionTensor) -> KurtosisTensor {
    let md = theta_d.mean_diffusivity();
    if md > 0.0 {
        KurtosisTensor(scaled.0 / (md * md))
    } else {
        KurtosisTensor(scaled.0 * 0.0)
    }
}

/// Fits one voxel with the chosen estimator.
pub fn fit(
    kind: EstimatorKind,
    data: &VoxelData,
    design: &DesignMatrices,
    opts: &FitOptions,
) -> Result<FitResult, EstimatorError> {
    match kind {
        EstimatorKind::Wls => wls::wls_fit_result(data, design, opts.weights),
        EstimatorKind::Cwls => cwls_fit(data, design, opts),
        EstimatorKind::Mle => em_mle_fit(data, design, opts),
    }
}
