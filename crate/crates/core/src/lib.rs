//! Per-voxel diffusion kurtosis estimation under Rician noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`protocol`] holds the acquisition scheme and the design matrices built from it.
//! * [`tensor`] holds the Cholesky and Gram (ternary quartic) parametrizations of the
//!   diffusion and kurtosis tensors, their derivatives and the forward signal model.
//! * [`rician`] holds the Rician magnitude density, the Von Mises phase posterior and
//!   the Bessel-ratio kernel used by the E-step.
//! * [`optimizer`] is a primal-dual log-barrier Fisher-scoring solver.
//! * [`estimators`] wires the above into WLS, constrained WLS and EM maximum likelihood.
//! * [`simulator`] and [`metrics`] generate synthetic voxels and score the fits.
//! * [`formats`] reads and writes the on-disk voxel tables, sidecars and fit records.
//!
//! Diffusivities are carried in μm²/ms (numerically equal to 10⁻³ mm²/s) and b-values in
//! ms/μm² everywhere inside the estimators; protocol files use s/mm², see
//! [`protocol::B_INTERNAL_SCALE`].

pub mod estimators;
pub mod formats;
pub mod linalg;
pub mod metrics;
pub mod optimizer;
pub mod protocol;
pub mod rician;
pub mod simulator;
pub mod tensor;

pub use estimators::{EstimatorKind, FitResult, VoxelData};
pub use protocol::{AcquisitionProtocol, DesignMatrices};
pub use tensor::ModelParams;
