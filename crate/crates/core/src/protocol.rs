//! Acquisition schemes and the design matrices derived from them.
//!
//! A protocol is a flat list of `(b, g)` pairs; several shells are simply several rows
//! with different `b`. Rows with `b = 0` produce zero design rows but stay in the data,
//! they still inform `S0` and `σ²`.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{Mat18, Vec15, Vec18, Vec6};

/// Factor converting b-values in s/mm² (file units) to ms/μm² (internal units).
pub const B_INTERNAL_SCALE: f64 = 1e-3;

/// Tolerance on `|g| - 1` for a validated protocol.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Tolerance on `|g| - 1` accepted (and renormalized) when reading a protocol file.
pub const LOAD_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("protocol has no acquisitions")]
    Empty,
    #[error("row {row}: gradient norm {norm} is not 1")]
    NonUnitGradient { row: usize, norm: f64 },
    #[error("row {row}: negative b-value {b}")]
    NegativeB { row: usize, b: f64 },
    #[error("row {row}: non-finite value")]
    NonFinite { row: usize },
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("invalid JSON protocol: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Acquisition {
    pub b: f64,
    pub g: Vector3<f64>,
}

impl Acquisition {
    pub fn new(b: f64, g: [f64; 3]) -> Self {
        Acquisition {
            b,
            g: Vector3::from(g),
        }
    }
}

/// Validated list of acquisitions. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionProtocol {
    acquisitions: Vec<Acquisition>,
}

impl AcquisitionProtocol {
    pub fn new(acquisitions: Vec<Acquisition>) -> Result<Self, ProtocolError> {
        if acquisitions.is_empty() {
            return Err(ProtocolError::Empty);
        }
        for (row, a) in acquisitions.iter().enumerate() {
            if !a.b.is_finite() || a.g.iter().any(|x| !x.is_finite()) {
                return Err(ProtocolError::NonFinite { row });
            }
            if a.b < 0.0 {
                return Err(ProtocolError::NegativeB { row, b: a.b });
            }
            let norm = a.g.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(ProtocolError::NonUnitGradient { row, norm });
            }
        }
        Ok(AcquisitionProtocol { acquisitions })
    }

    /// Every b-value combined with every direction, shell by shell.
    pub fn from_shells(b_values: &[f64], directions: &[Vector3<f64>]) -> Result<Self, ProtocolError> {
        let acquisitions = b_values
            .iter()
            .flat_map(|&b| directions.iter().map(move |&g| Acquisition { b, g }))
            .collect();
        Self::new(acquisitions)
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn acquisitions(&self) -> &[Acquisition] {
        &self.acquisitions
    }

    pub fn b_values(&self) -> Vec<f64> {
        self.acquisitions.iter().map(|a| a.b).collect()
    }

    pub fn max_b(&self) -> f64 {
        self.acquisitions.iter().map(|a| a.b).fold(0.0, f64::max)
    }

    /// Same directions with every b multiplied by `factor`.
    pub fn with_scaled_b(&self, factor: f64) -> Self {
        AcquisitionProtocol {
            acquisitions: self
                .acquisitions
                .iter()
                .map(|a| Acquisition { b: a.b * factor, g: a.g })
                .collect(),
        }
    }

    /// Design matrices in internal units (b in ms/μm²).
    pub fn internal_design(&self) -> DesignMatrices {
        build_design(&self.with_scaled_b(B_INTERNAL_SCALE))
    }

    /// Text form, one `b gx gy gz` line per acquisition.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# b[s/mm^2] gx gy gz\n");
        for a in &self.acquisitions {
            out.push_str(&format!(
                "{} {:.17e} {:.17e} {:.17e}\n",
                a.b, a.g[0], a.g[1], a.g[2]
            ));
        }
        out
    }
}

/// The quadratic monomial vector `v = (g1², g2², g3², g1g2, g1g3, g2g3)`.
pub fn monomials(g: &Vector3<f64>) -> Vec6 {
    let (x, y, z) = (g[0], g[1], g[2]);
    Vec6::from_column_slice(&[x * x, y * y, z * z, x * y, x * z, y * z])
}

/// Quartic monomials with the multiplicities of the distinct elements of a fully
/// symmetric rank-4 tensor, in `Z_W` column order. Contracting this with a
/// [`crate::tensor::KurtosisTensor`] gives `Σ g g g g W`.
pub fn quartic_monomials(g: &Vector3<f64>) -> Vec15 {
    let (x, y, z) = (g[0], g[1], g[2]);
    Vec15::from_column_slice(&[
        x.powi(4),
        y.powi(4),
        z.powi(4),
        6.0 * x * x * y * y,
        6.0 * x * x * z * z,
        6.0 * y * y * z * z,
        12.0 * x * x * y * z,
        12.0 * x * y * y * z,
        12.0 * x * y * z * z,
        4.0 * x.powi(3) * y,
        4.0 * x.powi(3) * z,
        4.0 * y.powi(3) * x,
        4.0 * y.powi(3) * z,
        4.0 * z.powi(3) * x,
        4.0 * z.powi(3) * y,
    ])
}

/// `Z_D`, `Z_W`, the monomial rows `v_j` and the b-values of one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub z_d: DMatrix<f64>,
    pub z_w: DMatrix<f64>,
    pub v: Vec<Vec6>,
    pub b: DVector<f64>,
    pub g: Vec<Vector3<f64>>,
}

impl DesignMatrices {
    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn z_d_row(&self, j: usize) -> Vec6 {
        Vec6::from_iterator(self.z_d.row(j).iter().copied())
    }

    pub fn z_w_row(&self, j: usize) -> Vec15 {
        Vec15::from_iterator(self.z_w.row(j).iter().copied())
    }

    /// Indices of the diffusion-weighted rows (`b > 0`).
    pub fn weighted_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.b[j] > 0.0).collect()
    }
}

pub fn build_design(protocol: &AcquisitionProtocol) -> DesignMatrices {
    let m = protocol.len();
    let mut z_d = DMatrix::zeros(m, 6);
    let mut z_w = DMatrix::zeros(m, 15);
    let mut v = Vec::with_capacity(m);
    let mut b = DVector::zeros(m);
    let mut g = Vec::with_capacity(m);
    for (j, acq) in protocol.acquisitions().iter().enumerate() {
        let vj = monomials(&acq.g);
        let zd = Vec6::from_column_slice(&[vj[0], vj[1], vj[2], 2.0 * vj[3], 2.0 * vj[4], 2.0 * vj[5]])
            * (-acq.b);
        let zw = quartic_monomials(&acq.g) * (acq.b * acq.b / 6.0);
        z_d.row_mut(j).copy_from(&zd.transpose());
        z_w.row_mut(j).copy_from(&zw.transpose());
        v.push(vj);
        b[j] = acq.b;
        g.push(acq.g);
    }
    DesignMatrices { z_d, z_w, v, b, g }
}

/// `θ_Qᵀ P θ_Q` for `P = (b²/6)·blockdiag(vvᵀ, vvᵀ, vvᵀ)`, without forming `P`.
pub fn apply_p(theta_q: &Vec18, v: &Vec6, b: f64) -> f64 {
    b * b / 6.0 * block_projections(theta_q, v).iter().map(|p| p * p).sum::<f64>()
}

/// `⟨v, q_i⟩` for the three 6-blocks of `θ_Q`.
pub fn block_projections(theta_q: &Vec18, v: &Vec6) -> [f64; 3] {
    std::array::from_fn(|i| v.dot(&theta_q.fixed_rows::<6>(6 * i)))
}

/// `P θ_Q`, an 18-vector.
pub fn p_times(theta_q: &Vec18, v: &Vec6, b: f64) -> Vec18 {
    let proj = block_projections(theta_q, v);
    let scale = b * b / 6.0;
    let mut out = Vec18::zeros();
    for (i, p) in proj.iter().enumerate() {
        out.fixed_rows_mut::<6>(6 * i).copy_from(&(v * (scale * p)));
    }
    out
}

/// Dense `P_j`.
pub fn p_matrix(v: &Vec6, b: f64) -> Mat18 {
    let block = v * v.transpose() * (b * b / 6.0);
    let mut p = Mat18::zeros();
    for i in 0..3 {
        p.fixed_view_mut::<6, 6>(6 * i, 6 * i).copy_from(&block);
    }
    p
}

#[derive(Deserialize, Serialize)]
struct JsonProtocol {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

/// Parse a protocol file in either the text (`b gx gy gz` per line, `#` comments) or the
/// JSON (`{"bvals": [...], "bvecs": [[...], ...]}`) form.
pub fn load_protocol(text: &str) -> Result<AcquisitionProtocol, ProtocolError> {
    let rows = if text.trim_start().starts_with('{') {
        let parsed: JsonProtocol =
            serde_json::from_str(text).map_err(|e| ProtocolError::Json(e.to_string()))?;
        if parsed.bvals.len() != parsed.bvecs.len() {
            return Err(ProtocolError::Json(format!(
                "{} bvals but {} bvecs",
                parsed.bvals.len(),
                parsed.bvecs.len()
            )));
        }
        parsed
            .bvals
            .into_iter()
            .zip(parsed.bvecs)
            .enumerate()
            .map(|(i, (b, g))| (i + 1, b, g))
            .collect::<Vec<_>>()
    } else {
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ProtocolError::Malformed {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if fields.len() != 4 {
                return Err(ProtocolError::Malformed {
                    line: i + 1,
                    reason: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            rows.push((i + 1, fields[0], [fields[1], fields[2], fields[3]]));
        }
        rows
    };

    let mut acquisitions = Vec::with_capacity(rows.len());
    for (row, (line, b, g)) in rows.into_iter().enumerate() {
        if !b.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(ProtocolError::Malformed {
                line,
                reason: "non-finite value".into(),
            });
        }
        let g = Vector3::from(g);
        let norm = g.norm();
        if (norm - 1.0).abs() > LOAD_NORM_TOL {
            return Err(ProtocolError::NonUnitGradient { row, norm });
        }
        acquisitions.push(Acquisition { b, g: g / norm });
    }
    AcquisitionProtocol::new(acquisitions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(b: f64, g: [f64; 3]) -> DesignMatrices {
        build_design(&AcquisitionProtocol::new(vec![Acquisition::new(b, g)]).unwrap())
    }

    #[test]
    fn axis_aligned_rows() {
        let d = single(1000.0, [1.0, 0.0, 0.0]);
        assert_eq!(d.z_d_row(0).as_slice(), &[-1000.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let mut zw = [0.0; 15];
        zw[0] = 1000.0 * 1000.0 / 6.0;
        assert_eq!(d.z_w_row(0).as_slice(), &zw);
        assert_eq!(d.v[0].as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn diagonal_gradient_z_d() {
        let s = 0.5f64.sqrt();
        let d = single(1.0, [s, s, 0.0]);
        let expected = [-0.5, -0.5, 0.0, -1.0, 0.0, 0.0];
        for (a, e) in d.z_d_row(0).iter().zip(expected) {
            assert_relative_eq!(*a, e, epsilon = 1e-15);
        }
    }

    /// Expand `(b²/6) Σ_{abcd} g_a g_b g_c g_d W_abcd` term by term over all 81 index
    /// tuples and collect the coefficient of each distinct element.
    fn brute_force_z_w(b: f64, g: &[f64; 3]) -> [f64; 15] {
        let order: [[usize; 4]; 15] = [
            [0, 0, 0, 0],
            [1, 1, 1, 1],
            [2, 2, 2, 2],
            [0, 0, 1, 1],
            [0, 0, 2, 2],
            [1, 1, 2, 2],
            [0, 0, 1, 2],
            [0, 1, 1, 2],
            [0, 1, 2, 2],
            [0, 0, 0, 1],
            [0, 0, 0, 2],
            [0, 1, 1, 1],
            [1, 1, 1, 2],
            [0, 2, 2, 2],
            [1, 2, 2, 2],
        ];
        let mut out = [0.0; 15];
        for a in 0..3 {
            for bb in 0..3 {
                for c in 0..3 {
                    for d in 0..3 {
                        let mut key = [a, bb, c, d];
                        key.sort();
                        let k = order.iter().position(|o| *o == key).unwrap();
                        out[k] += g[a] * g[bb] * g[c] * g[d];
                    }
                }
            }
        }
        out.map(|x| x * b * b / 6.0)
    }

    #[test]
    fn z_w_matches_polynomial_expansion() {
        let s = 1.0 / 3f64.sqrt();
        for (b, g) in [
            (1.0, [s, s, s]),
            (2.5, [0.6, -0.8, 0.0]),
            (1.3, [0.2, 0.4, -(1.0f64 - 0.2).sqrt()]),
        ] {
            let g = Vector3::from(g).normalize();
            let d = single(b, [g[0], g[1], g[2]]);
            let oracle = brute_force_z_w(b, &[g[0], g[1], g[2]]);
            for (a, e) in d.z_w_row(0).iter().zip(oracle) {
                assert_relative_eq!(*a, e, epsilon = 1e-14);
            }
        }
        // the (1,1,1)/√3 row, first three and pair-square entries
        let d = single(1.0, [s, s, s]);
        assert_relative_eq!(d.z_w[(0, 0)], 1.0 / 54.0, epsilon = 1e-15);
        assert_relative_eq!(d.z_w[(0, 3)], 6.0 / 54.0, epsilon = 1e-15);
    }

    #[test]
    fn apply_p_examples() {
        let v = Vec6::from_column_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(apply_p(&Vec18::zeros(), &v, 3.0), 0.0);
        let mut q = Vec18::zeros();
        q[0] = 1.0;
        assert_relative_eq!(apply_p(&q, &v, 6f64.sqrt()), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_bad_rows() {
        assert_eq!(AcquisitionProtocol::new(vec![]), Err(ProtocolError::Empty));
        let err = AcquisitionProtocol::new(vec![
            Acquisition::new(1.0, [1.0, 0.0, 0.0]),
            Acquisition::new(1.0, [1.0, 0.1, 0.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, ProtocolError::NonUnitGradient { row: 1, .. }));
        assert!(matches!(
            AcquisitionProtocol::new(vec![Acquisition::new(-1.0, [1.0, 0.0, 0.0])]),
            Err(ProtocolError::NegativeB { row: 0, .. })
        ));
    }

    #[test]
    fn load_text_and_json_agree() {
        let text = "# comment\n0 1 0 0\n1000 0.737068 -0.568030 0.366160 # table row\n\n";
        let json = r#"{"bvals": [0, 1000], "bvecs": [[1,0,0],[0.737068,-0.568030,0.366160]]}"#;
        let a = load_protocol(text).unwrap();
        let b = load_protocol(json).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!((a.acquisitions()[1].g.norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn load_errors() {
        assert_eq!(load_protocol(""), Err(ProtocolError::Empty));
        assert!(matches!(load_protocol("1 2 3"), Err(ProtocolError::Malformed { line: 1, .. })));
        assert!(matches!(
            load_protocol("1 NaN 0 0"),
            Err(ProtocolError::Malformed { .. })
        ));
        assert!(matches!(
            load_protocol("1000 1 0.01 0"),
            Err(ProtocolError::NonUnitGradient { row: 0, .. })
        ));
        assert!(matches!(load_protocol("1000 1 x 0"), Err(ProtocolError::Malformed { .. })));
    }

    #[test]
    fn b_zero_rows_are_zero() {
        let d = single(0.0, [0.0, 1.0, 0.0]);
        assert!(d.z_d.iter().all(|&x| x == 0.0));
        assert!(d.z_w.iter().all(|&x| x == 0.0));
        assert!(d.weighted_rows().is_empty());
    }
}
