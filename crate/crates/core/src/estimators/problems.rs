//! The four block sub-problems (EM and CWLS, each over `L` and over `θ_Q`) in the form the
//! barrier solver consumes.
//!
//! Constraints are `g_j = θ_Qᵀ(6/b_j²)P_jθ_Q − 3·D_app,j/b_j ≤ 0` over the `b > 0` rows,
//! with `D_app,j = −Z_Dj·θ_D(L)/b_j`.

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::linalg::{Mat18, Mat6, Vec18, Vec6};
use crate::optimizer::BarrierProblem;
use crate::protocol::{apply_p, block_projections, p_matrix, p_times, DesignMatrices};
use crate::tensor::{jacobian_l, second_derivative_contraction, theta_d_from_l, CholeskyParams};

/// Per-row quantities shared by the sub-problems.
#[derive(Debug, Clone)]
pub struct SubproblemData {
    pub z_d: Vec<Vec6>,
    pub v: Vec<Vec6>,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    /// EM: `⟨cos φ_j⟩`. CWLS: unused.
    pub cos_phi: Vec<f64>,
    /// EM: `1 − ⟨cos φ_j⟩`.
    pub one_minus_cos_phi: Vec<f64>,
    /// CWLS weights `Y_j²/S0²`; zero rows carry weight 0.
    pub weights: Vec<f64>,
    pub s0: f64,
    pub sigma2: f64,
    /// Indices of the constrained (`b > 0`) rows.
    pub constrained: Vec<usize>,
}

impl SubproblemData {
    pub fn new(design: &DesignMatrices, y: &DVector<f64>, s0: f64, sigma2: f64) -> Self {
        let m = design.len();
        SubproblemData {
            z_d: (0..m).map(|j| design.z_d_row(j)).collect(),
            v: design.v.clone(),
            b: design.b.iter().copied().collect(),
            y: y.iter().copied().collect(),
            cos_phi: vec![0.0; m],
            one_minus_cos_phi: vec![1.0; m],
            weights: y.iter().map(|v| v * v / (s0 * s0)).collect(),
            s0,
            sigma2,
            constrained: design.weighted_rows(),
        }
    }

    pub fn with_state(mut self, cos_phi: &DVector<f64>, one_minus: &DVector<f64>) -> Self {
        self.cos_phi = cos_phi.iter().copied().collect();
        self.one_minus_cos_phi = one_minus.iter().copied().collect();
        self
    }

    fn len(&self) -> usize {
        self.b.len()
    }

    fn quartic(&self, theta_q: &Vec18, j: usize) -> f64 {
        block_projections(theta_q, &self.v[j]).iter().map(|p| p * p).sum()
    }

    fn constraint(&self, l: &Vec6, theta_q: &Vec18, j: usize) -> f64 {
        let b = self.b[j];
        let theta_d = theta_d_from_l(&CholeskyParams(*l)).0;
        self.quartic(theta_q, j) + 3.0 / (b * b) * self.z_d[j].dot(&theta_d)
    }

    fn exponent(&self, theta_d: &Vec6, theta_q: &Vec18, j: usize) -> f64 {
        self.z_d[j].dot(theta_d) + apply_p(theta_q, &self.v[j], self.b[j])
    }

    /// `blockdiag(vvᵀ, vvᵀ, vvᵀ)`, i.e. `(6/b²)·P_j`.
    fn block_gram(&self, j: usize) -> Mat18 {
        p_matrix(&self.v[j], 6.0_f64.sqrt())
    }

    fn block_gram_times(&self, theta_q: &Vec18, j: usize) -> Vec18 {
        p_times(theta_q, &self.v[j], 6.0_f64.sqrt())
    }
}

/// `g_j(L, θ_Q)` for every `b > 0` row.
pub fn constraint_values(l: &Vec6, theta_q: &Vec18, design: &DesignMatrices) -> Vec<f64> {
    let theta_d = theta_d_from_l(&CholeskyParams(*l)).0;
    design
        .weighted_rows()
        .into_iter()
        .map(|j| {
            let b = design.b[j];
            let q: f64 = block_projections(theta_q, &design.v[j]).iter().map(|p| p * p).sum();
            q + 3.0 / (b * b) * design.z_d_row(j).dot(&theta_d)
        })
        .collect()
}

fn to_vec6(x: &DVector<f64>) -> Vec6 {
    Vec6::from_iterator(x.iter().copied())
}

fn to_vec18(x: &DVector<f64>) -> Vec18 {
    Vec18::from_iterator(x.iter().copied())
}

fn dyn6(m: Mat6) -> DMatrix<f64> {
    DMatrix::from_iterator(6, 6, m.iter().copied())
}

fn dyn18(m: Mat18) -> DMatrix<f64> {
    DMatrix::from_iterator(18, 18, m.iter().copied())
}

/// Constraint Jacobian and curvature over `L` with `θ_Q` fixed.
fn l_constraints(data: &SubproblemData, theta_q: &Vec18, l: &Vec6) -> DVector<f64> {
    DVector::from_iterator(
        data.constrained.len(),
        data.constrained.iter().map(|&j| data.constraint(l, theta_q, j)),
    )
}

fn l_constraint_jacobian(data: &SubproblemData, l: &Vec6) -> DMatrix<f64> {
    let jl = jacobian_l(&CholeskyParams(*l));
    let mut a = DMatrix::zeros(data.constrained.len(), 6);
    for (r, &j) in data.constrained.iter().enumerate() {
        let b = data.b[j];
        let row = jl.transpose() * data.z_d[j] * (3.0 / (b * b));
        a.row_mut(r).copy_from(&row.transpose());
    }
    a
}

/// `M_Dj = (3/b_j²)·Σ_k Z_Dj,k ∂²θ_D,k/∂L∂L`, the Hessian of `g_j` in `L`.
pub fn constraint_curvature_l(z_d: &Vec6, b: f64) -> Mat6 {
    second_derivative_contraction(z_d) * (3.0 / (b * b))
}

fn l_constraint_curvature(data: &SubproblemData, lambda: &DVector<f64>) -> Mat6 {
    let mut m = Mat6::zeros();
    for (r, &j) in data.constrained.iter().enumerate() {
        m += constraint_curvature_l(&data.z_d[j], data.b[j]) * lambda[r];
    }
    m
}

fn q_constraints(data: &SubproblemData, l: &Vec6, theta_q: &Vec18) -> DVector<f64> {
    DVector::from_iterator(
        data.constrained.len(),
        data.constrained.iter().map(|&j| data.constraint(l, theta_q, j)),
    )
}

fn q_constraint_jacobian(data: &SubproblemData, theta_q: &Vec18) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(data.constrained.len(), 18);
    for (r, &j) in data.constrained.iter().enumerate() {
        let row = data.block_gram_times(theta_q, j) * 2.0;
        a.row_mut(r).copy_from(&row.transpose());
    }
    a
}

fn q_constraint_curvature(data: &SubproblemData, lambda: &DVector<f64>) -> Mat18 {
    let mut m = Mat18::zeros();
    for (r, &j) in data.constrained.iter().enumerate() {
        m += data.block_gram(j) * (2.0 * lambda[r]);
    }
    m
}

/// EM update of `L`: minimizes `Σ_j [½(Y_j − S_j)² + Y_jS_j(1 − ⟨cos φ_j⟩)]/σ²`, the negated
/// augmented log-likelihood up to terms constant in `L`, with `θ_Q`, `S0`, `σ²` held fixed.
pub struct EmLProblem<'a> {
    pub data: &'a SubproblemData,
    pub theta_q: Vec18,
}

impl EmLProblem<'_> {
    fn signals(&self, l: &Vec6) -> Vec<f64> {
        let theta_d = theta_d_from_l(&CholeskyParams(*l)).0;
        (0..self.data.len())
            .map(|j| self.data.s0 * self.data.exponent(&theta_d, &self.theta_q, j).exp())
            .collect()
    }
}

fn em_row_objective(data: &SubproblemData, s: f64, j: usize) -> f64 {
    let y = data.y[j];
    0.5 * (y - s).powi(2) + y * s * data.one_minus_cos_phi[j]
}

impl BarrierProblem for EmLProblem<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let s = self.signals(&to_vec6(theta));
        s.iter().enumerate().map(|(j, &sj)| em_row_objective(self.data, sj, j)).sum::<f64>() / self.data.sigma2
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let l = to_vec6(theta);
        let s = self.signals(&l);
        let mut grad_d = Vec6::zeros();
        for (j, &sj) in s.iter().enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            grad_d += self.data.z_d[j] * (sj * sj - tau * sj);
        }
        let g = jacobian_l(&CholeskyParams(l)).transpose() * grad_d / self.data.sigma2;
        DVector::from_iterator(6, g.iter().copied())
    }

    /// Expected information `Σ (2S² − τS)·(J_LᵀZᵀ)(ZJ_L)/σ² + Σ λ_j M_Dj`.
    fn information(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let l = to_vec6(theta);
        let s = self.signals(&l);
        let jl = jacobian_l(&CholeskyParams(l));
        let mut phi = Mat6::zeros();
        for (j, &sj) in s.iter().enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            let z = self.data.z_d[j];
            phi += z * z.transpose() * (2.0 * sj * sj - tau * sj);
        }
        let info = jl.transpose() * phi * jl / self.data.sigma2 + l_constraint_curvature(self.data, lambda);
        dyn6(info)
    }

    fn constraints(&self, theta: &DVector<f64>) -> DVector<f64> {
        l_constraints(self.data, &self.theta_q, &to_vec6(theta))
    }

    fn constraint_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        l_constraint_jacobian(self.data, &to_vec6(theta))
    }
}

/// EM update of `θ_Q` with `L`, `S0`, `σ²` held fixed; same objective as [`EmLProblem`].
pub struct EmQProblem<'a> {
    pub data: &'a SubproblemData,
    pub l: Vec6,
}

impl EmQProblem<'_> {
    fn signals(&self, theta_q: &Vec18) -> Vec<f64> {
        let theta_d = theta_d_from_l(&CholeskyParams(self.l)).0;
        (0..self.data.len())
            .map(|j| self.data.s0 * self.data.exponent(&theta_d, theta_q, j).exp())
            .collect()
    }
}

impl BarrierProblem for EmQProblem<'_> {
    fn dim(&self) -> usize {
        18
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let s = self.signals(&to_vec18(theta));
        s.iter().enumerate().map(|(j, &sj)| em_row_objective(self.data, sj, j)).sum::<f64>() / self.data.sigma2
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let q = to_vec18(theta);
        let s = self.signals(&q);
        let mut grad = Vec18::zeros();
        for (j, &sj) in s.iter().enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            grad += p_times(&q, &self.data.v[j], self.data.b[j]) * (2.0 * (sj * sj - tau * sj));
        }
        DVector::from_iterator(18, (grad / self.data.sigma2).iter().copied())
    }

    /// Observed information `Σ [4(2S² − τS)·PθθᵀP + 2(S² − τS)·P]/σ² + Σ λ_j·2B_j`.
    fn information(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let q = to_vec18(theta);
        let s = self.signals(&q);
        let mut h = Mat18::zeros();
        for (j, &sj) in s.iter().enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            let (a, c) = (sj * sj, tau * sj);
            let pq = p_times(&q, &self.data.v[j], self.data.b[j]);
            h += pq * pq.transpose() * (4.0 * (2.0 * a - c));
            h += p_matrix(&self.data.v[j], self.data.b[j]) * (2.0 * (a - c));
        }
        dyn18(h / self.data.sigma2 + q_constraint_curvature(self.data, lambda))
    }

    fn constraints(&self, theta: &DVector<f64>) -> DVector<f64> {
        q_constraints(self.data, &self.l, &to_vec18(theta))
    }

    fn constraint_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        q_constraint_jacobian(self.data, &to_vec18(theta))
    }
}

/// Weighted log-residuals `r_j = log Y_j − log S0 − Z_Djθ_D − θ_QᵀP_jθ_Q`; zero-magnitude
/// rows have weight 0 and residual 0.
fn cwls_residuals(data: &SubproblemData, theta_d: &Vec6, theta_q: &Vec18) -> Vec<f64> {
    (0..data.len())
        .map(|j| {
            if data.weights[j] == 0.0 {
                0.0
            } else {
                data.y[j].ln() - data.s0.ln() - data.exponent(theta_d, theta_q, j)
            }
        })
        .collect()
}

/// CWLS over `L`: `½Σ w_j r_j²/σ²` with `S0` and `σ²` fixed from WLS.
pub struct CwlsLProblem<'a> {
    pub data: &'a SubproblemData,
    pub theta_q: Vec18,
}

impl BarrierProblem for CwlsLProblem<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let theta_d = theta_d_from_l(&CholeskyParams(to_vec6(theta))).0;
        let r = cwls_residuals(self.data, &theta_d, &self.theta_q);
        0.5 * r.iter().zip(&self.data.weights).map(|(r, w)| w * r * r).sum::<f64>() / self.data.sigma2
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let l = to_vec6(theta);
        let theta_d = theta_d_from_l(&CholeskyParams(l)).0;
        let r = cwls_residuals(self.data, &theta_d, &self.theta_q);
        let mut grad_d = Vec6::zeros();
        for j in 0..self.data.len() {
            grad_d -= self.data.z_d[j] * (self.data.weights[j] * r[j]);
        }
        let g = jacobian_l(&CholeskyParams(l)).transpose() * grad_d / self.data.sigma2;
        DVector::from_iterator(6, g.iter().copied())
    }

    /// Exact Hessian `Σ w·(ZJ_L)ᵀ(ZJ_L) − Σ w·r·∂²(Zθ_D)/∂L² ` over `σ²`, plus `Σ λ_j M_Dj`.
    fn information(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let l = to_vec6(theta);
        let theta_d = theta_d_from_l(&CholeskyParams(l)).0;
        let r = cwls_residuals(self.data, &theta_d, &self.theta_q);
        let jl = jacobian_l(&CholeskyParams(l));
        let mut h = Mat6::zeros();
        for j in 0..self.data.len() {
            let w = self.data.weights[j];
            if w == 0.0 {
                continue;
            }
            let zj = jl.transpose() * self.data.z_d[j];
            h += zj * zj.transpose() * w;
            h -= second_derivative_contraction(&self.data.z_d[j]) * (w * r[j]);
        }
        dyn6(h / self.data.sigma2 + l_constraint_curvature(self.data, lambda))
    }

    fn constraints(&self, theta: &DVector<f64>) -> DVector<f64> {
        l_constraints(self.data, &self.theta_q, &to_vec6(theta))
    }

    fn constraint_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        l_constraint_jacobian(self.data, &to_vec6(theta))
    }
}

/// CWLS over `θ_Q` with `L` fixed.
pub struct CwlsQProblem<'a> {
    pub data: &'a SubproblemData,
    pub l: Vec6,
}

impl BarrierProblem for CwlsQProblem<'_> {
    fn dim(&self) -> usize {
        18
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let theta_d = theta_d_from_l(&CholeskyParams(self.l)).0;
        let r = cwls_residuals(self.data, &theta_d, &to_vec18(theta));
        0.5 * r.iter().zip(&self.data.weights).map(|(r, w)| w * r * r).sum::<f64>() / self.data.sigma2
    }

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let q = to_vec18(theta);
        let theta_d = theta_d_from_l(&CholeskyParams(self.l)).0;
        let r = cwls_residuals(self.data, &theta_d, &q);
        let mut grad = Vec18::zeros();
        for j in 0..self.data.len() {
            grad -= p_times(&q, &self.data.v[j], self.data.b[j]) * (2.0 * self.data.weights[j] * r[j]);
        }
        DVector::from_iterator(18, (grad / self.data.sigma2).iter().copied())
    }

    /// Exact Hessian `Σ w·4PθθᵀP − Σ w·r·2P` over `σ²`, plus `Σ λ_j·2B_j`.
    fn information(&self, theta: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let q = to_vec18(theta);
        let theta_d = theta_d_from_l(&CholeskyParams(self.l)).0;
        let r = cwls_residuals(self.data, &theta_d, &q);
        let mut h = Mat18::zeros();
        for j in 0..self.data.len() {
            let w = self.data.weights[j];
            if w == 0.0 {
                continue;
            }
            let pq = p_times(&q, &self.data.v[j], self.data.b[j]);
            h += pq * pq.transpose() * (4.0 * w);
            h -= p_matrix(&self.data.v[j], self.data.b[j]) * (2.0 * w * r[j]);
        }
        dyn18(h / self.data.sigma2 + q_constraint_curvature(self.data, lambda))
    }

    fn constraints(&self, theta: &DVector<f64>) -> DVector<f64> {
        q_constraints(self.data, &self.l, &to_vec18(theta))
    }

    fn constraint_jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        q_constraint_jacobian(self.data, &to_vec18(theta))
    }
}

/// Which criterion a [`JointProblem`] minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Criterion {
    /// The EM objective of [`EmLProblem`]/[`EmQProblem`].
    Em,
    /// The weighted log-residual objective of [`CwlsLProblem`]/[`CwlsQProblem`].
    Cwls,
}

/// Both blocks at once, `x = (L, θ_Q)`: the same objective and constraints as the block
/// problems, with information `[[I_L, C], [Cᵀ, I_Q]]` where
/// `C = Σ c_j·(J_LᵀZ_Dj)(2P_jθ_Q)ᵀ/σ²`, `c_j = 2S_j² − τ_jS_j` (EM) or `w_j` (CWLS).
pub struct JointProblem<'a> {
    pub data: &'a SubproblemData,
    pub criterion: Criterion,
}

impl JointProblem<'_> {
    fn split(x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (x.rows(0, 6).into_owned(), x.rows(6, 18).into_owned())
    }

    pub(crate) fn blocks<'b>(&'b self, l: &Vec6, q: &Vec18) -> (Box<dyn BarrierProblem + 'b>, Box<dyn BarrierProblem + 'b>) {
        match self.criterion {
            Criterion::Em => (
                Box::new(EmLProblem { data: self.data, theta_q: *q }),
                Box::new(EmQProblem { data: self.data, l: *l }),
            ),
            Criterion::Cwls => (
                Box::new(CwlsLProblem { data: self.data, theta_q: *q }),
                Box::new(CwlsQProblem { data: self.data, l: *l }),
            ),
        }
    }

    fn cross(&self, l: &Vec6, q: &Vec18) -> SMatrix<f64, 6, 18> {
        let theta_d = theta_d_from_l(&CholeskyParams(*l)).0;
        let jl = jacobian_l(&CholeskyParams(*l));
        let mut c = SMatrix::<f64, 6, 18>::zeros();
        for j in 0..self.data.len() {
            let weight = match self.criterion {
                Criterion::Em => {
                    let s = self.data.s0 * self.data.exponent(&theta_d, q, j).exp();
                    let tau = self.data.y[j] * self.data.cos_phi[j];
                    2.0 * s * s - tau * s
                }
                Criterion::Cwls => self.data.weights[j],
            };
            if weight == 0.0 {
                continue;
            }
            let dl = jl.transpose() * self.data.z_d[j];
            let dq = p_times(q, &self.data.v[j], self.data.b[j]) * 2.0;
            c += dl * dq.transpose() * weight;
        }
        c / self.data.sigma2
    }
}

impl BarrierProblem for JointProblem<'_> {
    fn dim(&self) -> usize {
        24
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let (l, q) = Self::split(x);
        let (pl, _) = self.blocks(&to_vec6(&l), &to_vec18(&q));
        pl.objective(&l)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (l, q) = Self::split(x);
        let (pl, pq) = self.blocks(&to_vec6(&l), &to_vec18(&q));
        let mut g = DVector::zeros(24);
        g.rows_mut(0, 6).copy_from(&pl.gradient(&l));
        g.rows_mut(6, 18).copy_from(&pq.gradient(&q));
        g
    }

    fn information(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let (l, q) = Self::split(x);
        let (l6, q18) = (to_vec6(&l), to_vec18(&q));
        let (pl, pq) = self.blocks(&l6, &q18);
        let mut h = DMatrix::zeros(24, 24);
        h.view_mut((0, 0), (6, 6)).copy_from(&pl.information(&l, lambda));
        h.view_mut((6, 6), (18, 18)).copy_from(&pq.information(&q, lambda));
        let c = self.cross(&l6, &q18);
        h.view_mut((0, 6), (6, 18)).copy_from(&c);
        h.view_mut((6, 0), (18, 6)).copy_from(&c.transpose());
        h
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let (l, q) = Self::split(x);
        l_constraints(self.data, &to_vec18(&q), &to_vec6(&l))
    }

    fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (l, q) = Self::split(x);
        let mut a = DMatrix::zeros(self.data.constrained.len(), 24);
        a.columns_mut(0, 6).copy_from(&l_constraint_jacobian(self.data, &to_vec6(&l)));
        a.columns_mut(6, 18).copy_from(&q_constraint_jacobian(self.data, &to_vec18(&q)));
        a
    }
}

/// EM M-step over `x = (ln S0, L, θ_Q)` with `σ²` and the E-step fixed: the objective of
/// [`EmLProblem`] with `S0` free. Without `b = 0` rows `S0` and `θ_D` are strongly coupled,
/// and updating them in separate steps crawls along the kurtosis bound.
pub struct EmScaledProblem<'a> {
    pub data: &'a SubproblemData,
}

impl EmScaledProblem<'_> {
    fn split(x: &DVector<f64>) -> (f64, Vec6, Vec18) {
        (x[0], to_vec6(&x.rows(1, 6).into_owned()), to_vec18(&x.rows(7, 18).into_owned()))
    }

    /// Signals and the derivative of each row's exponent with respect to `x`.
    fn rows(&self, x: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        let (u, l, q) = Self::split(x);
        let theta_d = theta_d_from_l(&CholeskyParams(l)).0;
        let jl = jacobian_l(&CholeskyParams(l));
        (0..self.data.len())
            .map(|j| {
                let s = (u + self.data.exponent(&theta_d, &q, j)).exp();
                let mut a = DVector::zeros(25);
                a[0] = 1.0;
                a.rows_mut(1, 6).copy_from(&(jl.transpose() * self.data.z_d[j]));
                a.rows_mut(7, 18).copy_from(&(p_times(&q, &self.data.v[j], self.data.b[j]) * 2.0));
                (s, a)
            })
            .unzip()
    }
}

impl BarrierProblem for EmScaledProblem<'_> {
    fn dim(&self) -> usize {
        25
    }

    fn n_constraints(&self) -> usize {
        self.data.constrained.len()
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        let (u, l, q) = Self::split(x);
        let theta_d = theta_d_from_l(&CholeskyParams(l)).0;
        (0..self.data.len())
            .map(|j| em_row_objective(self.data, (u + self.data.exponent(&theta_d, &q, j)).exp(), j))
            .sum::<f64>()
            / self.data.sigma2
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (s, a) = self.rows(x);
        let mut g = DVector::zeros(25);
        for (j, (sj, aj)) in s.iter().zip(&a).enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            g += aj * (sj * sj - tau * sj);
        }
        g / self.data.sigma2
    }

    /// `Σ (2S² − τS)·aaᵀ/σ²` over the exponent gradients `a_j`, the exact `θ_Q` curvature
    /// `Σ 2(S² − τS)·P/σ²`, and the constraint curvature of both tensor blocks.
    fn information(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> DMatrix<f64> {
        let (s, a) = self.rows(x);
        let mut h = DMatrix::zeros(25, 25);
        let mut pq = Mat18::zeros();
        for (j, (sj, aj)) in s.iter().zip(&a).enumerate() {
            let tau = self.data.y[j] * self.data.cos_phi[j];
            h += aj * aj.transpose() * (2.0 * sj * sj - tau * sj);
            pq += p_matrix(&self.data.v[j], self.data.b[j]) * (2.0 * (sj * sj - tau * sj));
        }
        h /= self.data.sigma2;
        let mut lq = h.view_mut((1, 1), (6, 6));
        lq += dyn6(l_constraint_curvature(self.data, lambda));
        let mut qq = h.view_mut((7, 7), (18, 18));
        qq += dyn18(pq / self.data.sigma2 + q_constraint_curvature(self.data, lambda));
        h
    }

    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let (_, l, q) = Self::split(x);
        l_constraints(self.data, &q, &l)
    }

    fn constraint_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (_, l, q) = Self::split(x);
        let mut a = DMatrix::zeros(self.data.constrained.len(), 25);
        a.columns_mut(1, 6).copy_from(&l_constraint_jacobian(self.data, &l));
        a.columns_mut(7, 18).copy_from(&q_constraint_jacobian(self.data, &q));
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::AcquisitionProtocol;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(rng: &mut ChaCha8Rng) -> SubproblemData {
        let dirs = crate::metrics::fibonacci_hemisphere(15);
        let design = AcquisitionProtocol::from_shells(&[0.0, 800.0, 1600.0], &dirs)
            .unwrap()
            .internal_design();
        let y = DVector::from_fn(design.len(), |_, _| rng.random_range(0.2..1.0));
        let cos = DVector::from_fn(design.len(), |_, _| rng.random_range(0.5..1.0));
        let rest = cos.map(|c| 1.0 - c);
        SubproblemData::new(&design, &y, 1.1, 0.01).with_state(&cos, &rest)
    }

    fn fd_gradient(p: &dyn BarrierProblem, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        DVector::from_fn(x.len(), |i, _| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            (p.objective(&a) - p.objective(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let d = data(&mut rng);
            let l = Vec6::from_fn(|i, _| if i < 3 { rng.random_range(0.7..1.1) } else { rng.random_range(-0.2..0.2) });
            let q = Vec18::from_fn(|_, _| rng.random_range(-0.2..0.2));
            let lx = DVector::from_iterator(6, l.iter().copied());
            let qx = DVector::from_iterator(18, q.iter().copied());
            let problems: [(Box<dyn BarrierProblem>, &DVector<f64>); 4] = [
                (Box::new(EmLProblem { data: &d, theta_q: q }), &lx),
                (Box::new(EmQProblem { data: &d, l }), &qx),
                (Box::new(CwlsLProblem { data: &d, theta_q: q }), &lx),
                (Box::new(CwlsQProblem { data: &d, l }), &qx),
            ];
            for (p, x) in problems.iter() {
                let g = p.gradient(x);
                let fd = fd_gradient(p.as_ref(), x);
                assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0), "{g} vs {fd}");
            }
            let joint_x = DVector::from_iterator(24, l.iter().chain(q.iter()).copied());
            for criterion in [Criterion::Em, Criterion::Cwls] {
                let p = JointProblem { data: &d, criterion };
                let g = p.gradient(&joint_x);
                let fd = fd_gradient(&p, &joint_x);
                assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0), "{g} vs {fd}");
            }
            let scaled = EmScaledProblem { data: &d };
            let sx = DVector::from_iterator(25, std::iter::once(d.s0.ln()).chain(l.iter().copied()).chain(q.iter().copied()));
            let block = EmLProblem { data: &d, theta_q: q };
            assert!((scaled.objective(&sx) - block.objective(&lx)).abs() <= 1e-12 * block.objective(&lx).abs());
            let g = scaled.gradient(&sx);
            let fd = fd_gradient(&scaled, &sx);
            assert!((&g - &fd).norm() <= 1e-6 * g.norm().max(1.0), "{g} vs {fd}");
        }
    }

    #[test]
    fn scaled_em_information_is_exact_outside_the_cholesky_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = data(&mut rng);
        let l = Vec6::from_fn(|i, _| if i < 3 { rng.random_range(0.7..1.1) } else { rng.random_range(-0.2..0.2) });
        let q = Vec18::from_fn(|_, _| rng.random_range(-0.2..0.2));
        let x = DVector::from_iterator(25, std::iter::once(d.s0.ln()).chain(l.iter().copied()).chain(q.iter().copied()));
        let p = EmScaledProblem { data: &d };
        let h = p.information(&x, &DVector::zeros(p.n_constraints()));
        let step = 1e-5;
        for i in std::iter::once(0).chain(7..25) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let col = (p.gradient(&xp) - p.gradient(&xm)) / (2.0 * step);
            let diff = (h.column(i) - &col).norm();
            assert!(diff <= 1e-4 * col.norm().max(1.0), "column {i}: {diff}");
        }
    }

    #[test]
    fn joint_cwls_information_is_the_hessian() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = data(&mut rng);
        let l = Vec6::from_fn(|i, _| if i < 3 { rng.random_range(0.7..1.1) } else { rng.random_range(-0.2..0.2) });
        let q = Vec18::from_fn(|_, _| rng.random_range(-0.2..0.2));
        let x = DVector::from_iterator(24, l.iter().chain(q.iter()).copied());
        let p = JointProblem { data: &d, criterion: Criterion::Cwls };
        let h = p.information(&x, &DVector::zeros(p.n_constraints()));
        let step = 1e-5;
        for i in 0..24 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += step;
            xm[i] -= step;
            let col = (p.gradient(&xp) - p.gradient(&xm)) / (2.0 * step);
            let diff = (h.column(i) - &col).norm();
            assert!(diff <= 1e-4 * col.norm().max(1.0), "column {i}: {diff}");
        }
    }

    #[test]
    fn b0_rows_are_unconstrained() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = data(&mut rng);
        assert_eq!(d.constrained.len(), d.len() - 15);
        assert!(d.constrained.iter().all(|&j| d.b[j] > 0.0));
    }
}
