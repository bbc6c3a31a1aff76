//! Fixed-size vector aliases and a few small dense helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, Matrix3, SMatrix, SVector, Vector3};

pub type Vec6 = SVector<f64, 6>;
pub type Vec15 = SVector<f64, 15>;
pub type Vec18 = SVector<f64, 18>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat18 = SMatrix<f64, 18, 18>;

/// Symmetric 3×3 matrix from the (xx, yy, zz, xy, xz, yz) ordering.
pub fn sym3_from_vec6(v: &Vec6) -> Matrix3<f64> {
    Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2])
}

pub fn vec6_from_sym3(m: &Matrix3<f64>) -> Vec6 {
    Vec6::from_column_slice(&[
        m[(0, 0)],
        m[(1, 1)],
        m[(2, 2)],
        0.5 * (m[(0, 1)] + m[(1, 0)]),
        0.5 * (m[(0, 2)] + m[(2, 0)]),
        0.5 * (m[(1, 2)] + m[(2, 1)]),
    ])
}

/// Smallest eigenvalue of a symmetric 3×3 matrix.
pub fn min_eigenvalue3(m: &Matrix3<f64>) -> f64 {
    m.symmetric_eigenvalues().min()
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite()) && Cholesky::new(m.clone()).is_some()
}

/// Unit vector or `None` when the input is (numerically) zero.
pub fn normalized(g: &Vector3<f64>) -> Option<Vector3<f64>> {
    let n = g.norm();
    (n > 0.0 && n.is_finite()).then(|| g / n)
}

/// Uniformly distributed rotation from three uniform variates (Shoemake).
pub fn rotation_from_uniforms(u1: f64, u2: f64, u3: f64) -> Matrix3<f64> {
    use std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(
        b * (TAU * u3).cos(),
        a * (TAU * u2).sin(),
        a * (TAU * u2).cos(),
        b * (TAU * u3).sin(),
    );
    nalgebra::UnitQuaternion::from_quaternion(q)
        .to_rotation_matrix()
        .into_inner()
}
