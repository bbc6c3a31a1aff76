//! Strictly feasible starting values from a WLS fit.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen};

use super::WlsOutput;
use crate::linalg::{vec6_from_sym3, Mat6, Vec15, Vec18};
use crate::protocol::DesignMatrices;
use crate::tensor::{cholesky_of_d, gram_from_kurtosis, kurtosis_from_gram, DiffusionTensor, GramMatrix, KurtosisQ, ModelParams};

/// Relative margin kept from the constraint #3 boundary after shrinking `θ_Q`.
pub const INIT_FEASIBILITY_MARGIN: f64 = 1e-3;

/// Relative eigenvalue floor applied to `D`.
const EIGEN_FLOOR: f64 = 1e-6;

/// Alternating-projection sweeps used to pick the free Gram parameters.
const GRAM_ITERATIONS: usize = 500;

/// Diffusivity (μm²/ms) used when WLS returns a tensor with no positive eigenvalue.
const FALLBACK_DIFFUSIVITY: f64 = 1.0;

fn clamp_diffusion(theta_d: &DiffusionTensor) -> DiffusionTensor {
    let eig = SymmetricEigen::new(theta_d.matrix());
    let max = eig.eigenvalues.max();
    if !(max > 0.0) || !max.is_finite() {
        return DiffusionTensor::isotropic(FALLBACK_DIFFUSIVITY);
    }
    let floor = EIGEN_FLOOR * max;
    let clamped = eig.eigenvalues.map(|x| x.max(floor));
    let d: Matrix3<f64> = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    DiffusionTensor(vec6_from_sym3(&d))
}

fn descending(values: &nalgebra::Vector6<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Nearest positive semidefinite matrix of rank at most three.
fn truncate_rank3(g: &Mat6) -> Mat6 {
    let eig = SymmetricEigen::new(*g);
    let mut out = Mat6::zeros();
    for &k in descending(&eig.eigenvalues).iter().take(3) {
        let lambda = eig.eigenvalues[k];
        if lambda > 0.0 {
            let e = eig.eigenvectors.column(k);
            out += e * e.transpose() * lambda;
        }
    }
    out
}

/// Entry pairs spanning the Gram matrices with zero quartic: `(a, b)` off-diagonal gets +1
/// and `(c, d)` gets `−weight`, so `(a, b, c, d, weight)`.
const NULL_DIRECTIONS: [(usize, usize, usize, usize, f64); 6] = [
    (0, 1, 3, 3, 2.0),
    (0, 2, 4, 4, 2.0),
    (1, 2, 5, 5, 2.0),
    (0, 5, 3, 4, 1.0),
    (1, 4, 3, 5, 1.0),
    (2, 3, 4, 5, 1.0),
];

/// Orthogonal (Frobenius) projection of `p` onto the Gram matrices representing the same
/// quartic as `g0`.
fn project_affine(p: &Mat6, g0: &Mat6) -> Mat6 {
    let d = p - g0;
    let mut g = *g0;
    for &(a, b, c, e, weight) in &NULL_DIRECTIONS {
        // ⟨d, N⟩/⟨N, N⟩ with N = sym(a, b) − weight·sym(c, e)
        let diag = c == e;
        let (inner, norm) = if diag {
            (2.0 * d[(a, b)] - weight * d[(c, c)], 2.0 + weight * weight)
        } else {
            (2.0 * d[(a, b)] - 2.0 * weight * d[(c, e)], 2.0 + 2.0 * weight * weight)
        };
        let t = inner / norm;
        g[(a, b)] += t;
        g[(b, a)] += t;
        g[(c, e)] -= weight * t;
        if !diag {
            g[(e, c)] -= weight * t;
        }
    }
    g
}

/// A rank-3 positive semidefinite Gram matrix whose quartic is as close to `w` as
/// alternating projections between the two sets find, starting from [`gram_from_kurtosis`].
/// Exact whenever `w` has such a representation and the iteration reaches it.
pub fn rank3_representation(w: &Vec15) -> Mat6 {
    let g0 = gram_from_kurtosis(w).0;
    let scale = w.norm().max(f64::MIN_POSITIVE);
    let mut g = g0;
    let mut best = (f64::INFINITY, Mat6::zeros());
    for _ in 0..GRAM_ITERATIONS {
        let p = truncate_rank3(&g);
        let residual = (kurtosis_from_gram(&GramMatrix(p)).0 - w).norm();
        if residual < best.0 {
            best = (residual, p);
        }
        if residual <= 1e-13 * scale {
            break;
        }
        g = project_affine(&p, &g0);
    }
    best.1
}

/// WLS estimates mapped into the constrained parametrization: `D` eigen-clamped and
/// Cholesky-factored, `θ_W` represented by a rank-3 positive semidefinite Gram matrix
/// (see [`rank3_representation`]), and `θ_Q` shrunk until constraint #3 holds with a small
/// margin.
pub fn init_params(wls: &WlsOutput, design: &DesignMatrices) -> ModelParams {
    let theta_d = clamp_diffusion(&DiffusionTensor(wls.theta_d));
    let l = match cholesky_of_d(&theta_d) {
        Ok(l) => l,
        Err(_) => cholesky_of_d(&DiffusionTensor::isotropic(FALLBACK_DIFFUSIVITY)).expect("identity is PD"),
    };
    let theta_d = crate::tensor::theta_d_from_l(&l);
    let md = theta_d.mean_diffusivity();

    let gram = rank3_representation(&(wls.theta_w / (md * md)));
    let eig = SymmetricEigen::new(gram);
    let mut q = SMatrix::<f64, 6, 3>::zeros();
    for (col, &k) in descending(&eig.eigenvalues).iter().take(3).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        q.set_column(col, &(eig.eigenvectors.column(k) * (lambda.sqrt() * md)));
    }
    let mut theta_q: Vec18 = KurtosisQ::from_matrix(&q).0;

    // s²·quartic ≤ (1 − margin)·3·D_app/b on every weighted row
    let mut scale: f64 = 1.0;
    for j in design.weighted_rows() {
        let b = design.b[j];
        let quartic: f64 = crate::protocol::block_projections(&theta_q, &design.v[j])
            .iter()
            .map(|p| p * p)
            .sum();
        let d_app = -design.z_d_row(j).dot(&theta_d.0) / b;
        let bound = (1.0 - INIT_FEASIBILITY_MARGIN) * 3.0 * d_app / b;
        if quartic > bound {
            scale = scale.min((bound / quartic).sqrt());
        }
    }
    theta_q *= scale;

    let s0 = wls.log_s0.exp();
    let sigma2 = if wls.sigma2 > 0.0 { wls.sigma2 } else { 1e-12 * s0 * s0 };
    ModelParams {
        l,
        theta_q: KurtosisQ(theta_q),
        s0,
        sigma2,
    }
}
