//! Tensor parametrizations and the forward signal model.
//!
//! The diffusion tensor is carried through its Cholesky factor `L` so that `D = UUᵀ` is
//! positive semidefinite for every `L`. The kurtosis tensor is carried through an 18-vector
//! `θ_Q = MD·(q1; q2; q3)` whose Gram matrix `G = QQᵀ/MD²` is positive semidefinite, which
//! makes the quartic `vᵀGv` (the apparent kurtosis numerator) non-negative in every
//! direction.
//!
//! `θ_W` vectors follow the `Z_W` column order:
//! `W1111 W2222 W3333 W1122 W1133 W2233 W1123 W1223 W1233 W1112 W1113 W1222 W2223 W1333 W2333`.

use nalgebra::{Cholesky, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{sym3_from_vec6, Mat6, Vec15, Vec18, Vec6};
use crate::protocol::{apply_p, quartic_monomials, DesignMatrices};

/// Default cap on the signal exponent in [`predict_signal`].
pub const DEFAULT_EXPONENT_CAP: f64 = 50.0;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("diffusion tensor is not positive definite (minimum eigenvalue {min_eigenvalue})")]
    NotPositiveDefinite { min_eigenvalue: f64 },
    #[error("mean diffusivity must be positive, got {0}")]
    NonPositiveMd(f64),
    #[error("apparent diffusivity must be positive, got {0}")]
    NonPositiveDapp(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CholeskyParams(pub Vec6);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionTensor(pub Vec6);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KurtosisQ(pub Vec18);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GramMatrix(pub Mat6);

/// Distinct elements of the kurtosis tensor `W`, in `Z_W` column order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KurtosisTensor(pub Vec15);

impl CholeskyParams {
    /// The lower-triangular factor `U`.
    pub fn factor(&self) -> Matrix3<f64> {
        let l = &self.0;
        Matrix3::new(l[0], 0.0, 0.0, l[3], l[1], 0.0, l[4], l[5], l[2])
    }
}

impl DiffusionTensor {
    pub fn matrix(&self) -> Matrix3<f64> {
        sym3_from_vec6(&self.0)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    /// Mean diffusivity `tr(D)/3`.
    pub fn mean_diffusivity(&self) -> f64 {
        self.trace() / 3.0
    }

    /// `gᵀDg`.
    pub fn apparent(&self, g: &Vector3<f64>) -> f64 {
        g.dot(&(self.matrix() * g))
    }

    pub fn isotropic(d: f64) -> Self {
        DiffusionTensor(Vec6::from_column_slice(&[d, d, d, 0.0, 0.0, 0.0]))
    }
}

impl KurtosisQ {
    /// The 6×3 matrix `[q1 | q2 | q3]` (MD scaling included).
    pub fn matrix(&self) -> SMatrix<f64, 6, 3> {
        SMatrix::<f64, 6, 3>::from_column_slice(self.0.as_slice())
    }

    pub fn from_matrix(q: &SMatrix<f64, 6, 3>) -> Self {
        KurtosisQ(Vec18::from_column_slice(q.as_slice()))
    }

    /// `MD²·W` for the tensor represented by this `θ_Q`, i.e. the coefficients that
    /// multiply `Z_W` in the log-linear model.
    pub fn scaled_kurtosis(&self) -> Vec15 {
        let q = self.matrix();
        kurtosis_from_gram(&GramMatrix(q * q.transpose())).0
    }
}

impl KurtosisTensor {
    /// `Σ g_a g_b g_c g_d W_abcd`.
    pub fn contract(&self, g: &Vector3<f64>) -> f64 {
        quartic_monomials(g).dot(&self.0)
    }

    /// Isotropic tensor with kurtosis `k` in every direction.
    pub fn isotropic(k: f64) -> Self {
        let mut w = Vec15::zeros();
        w[0] = k;
        w[1] = k;
        w[2] = k;
        w[3] = k / 3.0;
        w[4] = k / 3.0;
        w[5] = k / 3.0;
        KurtosisTensor(w)
    }

    /// Position in the 15-vector of the element with (sorted or unsorted) indices.
    pub fn index_of(idx: [usize; 4]) -> usize {
        let mut counts = [0usize; 3];
        for i in idx {
            counts[i] += 1;
        }
        match counts {
            [4, 0, 0] => 0,
            [0, 4, 0] => 1,
            [0, 0, 4] => 2,
            [2, 2, 0] => 3,
            [2, 0, 2] => 4,
            [0, 2, 2] => 5,
            [2, 1, 1] => 6,
            [1, 2, 1] => 7,
            [1, 1, 2] => 8,
            [3, 1, 0] => 9,
            [3, 0, 1] => 10,
            [1, 3, 0] => 11,
            [0, 3, 1] => 12,
            [1, 0, 3] => 13,
            [0, 1, 3] => 14,
            _ => unreachable!("four indices in 0..3"),
        }
    }

    /// Full 3×3×3×3 array.
    pub fn to_full(&self) -> [[[[f64; 3]; 3]; 3]; 3] {
        let mut full = [[[[0.0; 3]; 3]; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        full[a][b][c][d] = self.0[Self::index_of([a, b, c, d])];
                    }
                }
            }
        }
        full
    }

    pub fn from_full(full: &[[[[f64; 3]; 3]; 3]; 3]) -> Self {
        let mut w = Vec15::zeros();
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        w[Self::index_of([a, b, c, d])] = full[a][b][c][d];
                    }
                }
            }
        }
        KurtosisTensor(w)
    }

    /// `W'_{abcd} = R_ai R_bj R_ck R_dl W_ijkl`.
    pub fn rotated(&self, r: &Matrix3<f64>) -> Self {
        let w = self.to_full();
        let mut out = [[[[0.0; 3]; 3]; 3]; 3];
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        let mut s = 0.0;
                        for i in 0..3 {
                            for j in 0..3 {
                                for k in 0..3 {
                                    for l in 0..3 {
                                        s += r[(a, i)] * r[(b, j)] * r[(c, k)] * r[(d, l)] * w[i][j][k][l];
                                    }
                                }
                            }
                        }
                        out[a][b][c][d] = s;
                    }
                }
            }
        }
        Self::from_full(&out)
    }
}

/// Full voxel parameter set `Θ = (L, θ_Q, S0, σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRecord", from = "ParamsRecord")]
pub struct ModelParams {
    pub l: CholeskyParams,
    pub theta_q: KurtosisQ,
    pub s0: f64,
    pub sigma2: f64,
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    #[serde(rename = "L")]
    l: [f64; 6],
    #[serde(rename = "thetaQ")]
    theta_q: [f64; 18],
    #[serde(rename = "S0")]
    s0: f64,
    sigma2: f64,
}

impl From<ModelParams> for ParamsRecord {
    fn from(p: ModelParams) -> Self {
        ParamsRecord {
            l: p.l.0.into(),
            theta_q: p.theta_q.0.into(),
            s0: p.s0,
            sigma2: p.sigma2,
        }
    }
}

impl From<ParamsRecord> for ModelParams {
    fn from(r: ParamsRecord) -> Self {
        ModelParams {
            l: CholeskyParams(Vec6::from(r.l)),
            theta_q: KurtosisQ(Vec18::from(r.theta_q)),
            s0: r.s0,
            sigma2: r.sigma2,
        }
    }
}

impl ModelParams {
    pub fn theta_d(&self) -> DiffusionTensor {
        theta_d_from_l(&self.l)
    }

    /// `MD²·W` (the `Z_W` coefficients).
    pub fn scaled_kurtosis(&self) -> Vec15 {
        self.theta_q.scaled_kurtosis()
    }

    /// The dimensionless kurtosis tensor `W`; `None` when `MD ≤ 0`.
    pub fn kurtosis(&self) -> Option<KurtosisTensor> {
        let md = self.theta_d().mean_diffusivity();
        (md > 0.0).then(|| KurtosisTensor(self.scaled_kurtosis() / (md * md)))
    }

    /// Gram matrix `G = QQᵀ/MD²`.
    pub fn gram(&self) -> Result<GramMatrix, TensorError> {
        gram_from_q(&self.theta_q, self.theta_d().mean_diffusivity())
    }
}

pub fn theta_d_from_l(l: &CholeskyParams) -> DiffusionTensor {
    let l = &l.0;
    DiffusionTensor(Vec6::from_column_slice(&[
        l[0] * l[0],
        l[1] * l[1] + l[3] * l[3],
        l[2] * l[2] + l[4] * l[4] + l[5] * l[5],
        l[0] * l[3],
        l[0] * l[4],
        l[3] * l[4] + l[1] * l[5],
    ]))
}

/// `∂θ_D/∂L`, rows indexed by `θ_D`, columns by `L`.
pub fn jacobian_l(l: &CholeskyParams) -> Mat6 {
    let l = &l.0;
    let mut j = Mat6::zeros();
    j[(0, 0)] = 2.0 * l[0];
    j[(1, 1)] = 2.0 * l[1];
    j[(1, 3)] = 2.0 * l[3];
    j[(2, 2)] = 2.0 * l[2];
    j[(2, 4)] = 2.0 * l[4];
    j[(2, 5)] = 2.0 * l[5];
    j[(3, 0)] = l[3];
    j[(3, 3)] = l[0];
    j[(4, 0)] = l[4];
    j[(4, 4)] = l[0];
    j[(5, 1)] = l[5];
    j[(5, 3)] = l[4];
    j[(5, 4)] = l[3];
    j[(5, 5)] = l[1];
    j
}

/// Cholesky factor of `D`; fails with the minimum eigenvalue when `D` is not PD.
pub fn cholesky_of_d(theta_d: &DiffusionTensor) -> Result<CholeskyParams, TensorError> {
    let d = theta_d.matrix();
    match Cholesky::new(d) {
        Some(c) => {
            let u = c.l();
            Ok(CholeskyParams(Vec6::from_column_slice(&[
                u[(0, 0)],
                u[(1, 1)],
                u[(2, 2)],
                u[(1, 0)],
                u[(2, 0)],
                u[(2, 1)],
            ])))
        }
        None => Err(TensorError::NotPositiveDefinite {
            min_eigenvalue: d.symmetric_eigenvalues().min(),
        }),
    }
}

/// `Σ_k z_k ∂²θ_{D,k}/∂L∂L`, the Hessian of `⟨z, θ_D(L)⟩`, which is constant in `L`.
pub fn second_derivative_contraction(z: &Vec6) -> Mat6 {
    let mut m = Mat6::zeros();
    m[(0, 0)] = 2.0 * z[0];
    m[(1, 1)] = 2.0 * z[1];
    m[(3, 3)] = 2.0 * z[1];
    m[(2, 2)] = 2.0 * z[2];
    m[(4, 4)] = 2.0 * z[2];
    m[(5, 5)] = 2.0 * z[2];
    for (a, b, val) in [(0, 3, z[3]), (0, 4, z[4]), (3, 4, z[5]), (1, 5, z[5])] {
        m[(a, b)] = val;
        m[(b, a)] = val;
    }
    m
}

/// `G = QQᵀ/MD²`.
pub fn gram_from_q(theta_q: &KurtosisQ, md: f64) -> Result<GramMatrix, TensorError> {
    if !(md > 0.0) {
        return Err(TensorError::NonPositiveMd(md));
    }
    let q = theta_q.matrix();
    Ok(GramMatrix(q * q.transpose() / (md * md)))
}

/// Distinct kurtosis elements whose quartic equals `vᵀGv` for every direction.
pub fn kurtosis_from_gram(gram: &GramMatrix) -> KurtosisTensor {
    let g = &gram.0;
    KurtosisTensor(Vec15::from_column_slice(&[
        g[(0, 0)],
        g[(1, 1)],
        g[(2, 2)],
        (2.0 * g[(0, 1)] + g[(3, 3)]) / 6.0,
        (2.0 * g[(0, 2)] + g[(4, 4)]) / 6.0,
        (2.0 * g[(1, 2)] + g[(5, 5)]) / 6.0,
        (g[(0, 5)] + g[(3, 4)]) / 6.0,
        (g[(1, 4)] + g[(3, 5)]) / 6.0,
        (g[(2, 3)] + g[(4, 5)]) / 6.0,
        g[(0, 3)] / 2.0,
        g[(0, 4)] / 2.0,
        g[(1, 3)] / 2.0,
        g[(1, 5)] / 2.0,
        g[(2, 4)] / 2.0,
        g[(2, 5)] / 2.0,
    ]))
}

/// One Gram matrix representing `θ_W`. Of the six free parameters, the three
/// off-block entries `G16, G25, G34` are set to zero and the pairs
/// `(G12, G44), (G13, G55), (G23, G66)` are split evenly. The result is symmetric but
/// not necessarily positive semidefinite.
pub fn gram_from_kurtosis(w: &Vec15) -> GramMatrix {
    let mut g = Mat6::zeros();
    let mut set = |a: usize, b: usize, v: f64| {
        g[(a, b)] = v;
        g[(b, a)] = v;
    };
    set(0, 0, w[0]);
    set(1, 1, w[1]);
    set(2, 2, w[2]);
    set(0, 1, 2.0 * w[3]);
    set(3, 3, 2.0 * w[3]);
    set(0, 2, 2.0 * w[4]);
    set(4, 4, 2.0 * w[4]);
    set(1, 2, 2.0 * w[5]);
    set(5, 5, 2.0 * w[5]);
    set(3, 4, 6.0 * w[6]);
    set(3, 5, 6.0 * w[7]);
    set(4, 5, 6.0 * w[8]);
    set(0, 3, 2.0 * w[9]);
    set(0, 4, 2.0 * w[10]);
    set(1, 3, 2.0 * w[11]);
    set(1, 5, 2.0 * w[12]);
    set(2, 4, 2.0 * w[13]);
    set(2, 5, 2.0 * w[14]);
    GramMatrix(g)
}

/// Noise-free signal for every acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub signal: DVector<f64>,
    /// True when some exponent exceeded the cap and was clamped.
    pub clamped: bool,
}

/// `S_j = S0·exp(Z_Dj θ_D(L) + θ_Qᵀ P_j θ_Q)`.
pub fn predict_signal(params: &ModelParams, design: &DesignMatrices) -> Prediction {
    predict_signal_with_cap(params, design, DEFAULT_EXPONENT_CAP)
}

pub fn predict_signal_with_cap(params: &ModelParams, design: &DesignMatrices, cap: f64) -> Prediction {
    let theta_d = params.theta_d().0;
    let mut clamped = false;
    let signal = DVector::from_iterator(
        design.len(),
        (0..design.len()).map(|j| {
            let mut e = design.z_d_row(j).dot(&theta_d) + apply_p(&params.theta_q.0, &design.v[j], design.b[j]);
            if e > cap {
                e = cap;
                clamped = true;
            }
            params.s0 * e.exp()
        }),
    );
    Prediction { signal, clamped }
}

/// `(D_app, K_app)` along a unit direction.
pub fn apparent_coefficients(
    theta_d: &DiffusionTensor,
    theta_w: &KurtosisTensor,
    g: &Vector3<f64>,
) -> Result<(f64, f64), TensorError> {
    let d_app = theta_d.apparent(g);
    if !(d_app > 0.0) {
        return Err(TensorError::NonPositiveDapp(d_app));
    }
    let md = theta_d.mean_diffusivity();
    Ok((d_app, (md / d_app).powi(2) * theta_w.contract(g)))
}
