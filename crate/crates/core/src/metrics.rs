//! Rotation-invariant scalar maps and the estimator evaluation harness.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::FitResult;
use crate::simulator::TruthRecord;
use crate::tensor::{DiffusionTensor, KurtosisTensor};

/// Sphere directions averaged for MK.
pub const N_DIR: usize = 1000;
/// Ring directions averaged for `K_⊥`.
pub const N_RING: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{fits} fits but {truths} ground-truth voxels")]
    LengthMismatch { fits: usize, truths: usize },
    #[error("nothing to evaluate")]
    Empty,
}

/// Spherical Fibonacci lattice of `n` unit vectors.
pub fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// Fibonacci lattice on the upper hemisphere (`z > 0`), for antipodally symmetric sampling.
pub fn fibonacci_hemisphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

/// `n` directions evenly spaced on the great circle orthogonal to `axis`.
pub fn ring_directions(axis: &Vector3<f64>, n: usize) -> Vec<Vector3<f64>> {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let u = a.cross(&helper).normalize();
    let w = a.cross(&u);
    (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            u * t.cos() + w * t.sin()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetrics {
    /// Mean diffusivity in μm²/ms (numerically 10⁻³ mm²/s).
    #[serde(deserialize_with = "nan_if_null")]
    pub md: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub fa: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub mk: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub k_perp: f64,
    #[serde(deserialize_with = "nan_if_null")]
    pub snr: f64,
    /// False when `MD ≤ 0` or `D_app ≤ 0` in some sampled direction.
    pub valid: bool,
}

// JSON has no NaN; serde_json writes non-finite values as null.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// `√(3/2)·‖D − MD·I‖_F / ‖D‖_F`.
pub fn fractional_anisotropy(d: &Matrix3<f64>) -> f64 {
    let norm = d.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let md = d.trace() / 3.0;
    (1.5f64).sqrt() * (d - Matrix3::identity() * md).norm() / norm
}

fn mean_kapp(theta_d: &DiffusionTensor, w: &KurtosisTensor, dirs: &[Vector3<f64>], valid: &mut bool) -> f64 {
    let md = theta_d.mean_diffusivity();
    let mut sum = 0.0;
    let mut n = 0usize;
    for g in dirs {
        let d_app = theta_d.apparent(g);
        if d_app > 0.0 {
            sum += (md / d_app).powi(2) * w.contract(g);
            n += 1;
        } else {
            *valid = false;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

pub fn scalar_metrics(theta_d: &DiffusionTensor, w: &KurtosisTensor, s0: f64, sigma2: f64) -> ScalarMetrics {
    scalar_metrics_with(theta_d, w, s0, sigma2, N_DIR, N_RING)
}

pub fn scalar_metrics_with(
    theta_d: &DiffusionTensor,
    w: &KurtosisTensor,
    s0: f64,
    sigma2: f64,
    n_dir: usize,
    n_ring: usize,
) -> ScalarMetrics {
    let d = theta_d.matrix();
    let md = theta_d.mean_diffusivity();
    let mut valid = md > 0.0;
    let fa = fractional_anisotropy(&d);
    let mk = mean_kapp(theta_d, w, &fibonacci_sphere(n_dir), &mut valid);
    let eig = SymmetricEigen::new(d);
    let principal = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    let k_perp = mean_kapp(theta_d, w, &ring_directions(&principal, n_ring), &mut valid);
    ScalarMetrics {
        md,
        fa,
        mk,
        k_perp,
        snr: s0 / sigma2.sqrt(),
        valid,
    }
}

/// One number per compared quantity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricErrors {
    pub md: f64,
    pub fa: f64,
    pub mk: f64,
    pub k_perp: f64,
    /// Over the 6-vector `θ_D`.
    pub dt: f64,
    /// Over the 15-vector `W`.
    pub kt: f64,
    pub snr: f64,
}

impl MetricErrors {
    const NAMES: [&'static str; 7] = ["MD", "FA", "MK", "K_perp", "DT", "KT", "SNR"];

    fn values(&self) -> [f64; 7] {
        [self.md, self.fa, self.mk, self.k_perp, self.dt, self.kt, self.snr]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub label: String,
    pub n: usize,
    /// Sample variance of the estimation error.
    pub variance: MetricErrors,
    pub mse: MetricErrors,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationRates {
    pub d_not_pd_pct: f64,
    pub k_negative_pct: f64,
    pub k_above_bound_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean_s: f64,
    pub max_s: f64,
    pub min_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub estimator: String,
    pub n_voxels: usize,
    pub groups: Vec<GroupStats>,
    pub variance: MetricErrors,
    pub mse: MetricErrors,
    /// Mean `|SNR_est − SNR_true|`.
    pub snr_abs_error: f64,
    pub violations: ViolationRates,
    pub runtime: RuntimeStats,
    pub mean_em_iterations: f64,
    pub non_converged: usize,
}

/// Per-voxel errors: scalar differences and mean squared component errors for DT/KT.
struct VoxelErrors {
    scalar: [f64; 5],
    dt: Vec<f64>,
    kt: Vec<f64>,
}

fn voxel_errors(fit: &FitResult, truth: &TruthRecord) -> VoxelErrors {
    let (td, tw) = truth.truth.tensors();
    let est = scalar_metrics(&fit.theta_d, &fit.kurtosis, fit.s0, fit.sigma2);
    let tru = scalar_metrics(&td, &tw, truth.s0, truth.sigma * truth.sigma);
    VoxelErrors {
        scalar: [
            est.md - tru.md,
            est.fa - tru.fa,
            est.mk - tru.mk,
            est.k_perp - tru.k_perp,
            est.snr - truth.snr,
        ],
        dt: (fit.theta_d.0 - td.0).iter().copied().collect(),
        kt: (fit.kurtosis.0 - tw.0).iter().copied().collect(),
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64
}

fn mse(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn aggregate(errors: &[&VoxelErrors]) -> (MetricErrors, MetricErrors) {
    let col = |k: usize| errors.iter().map(|e| e.scalar[k]).collect::<Vec<_>>();
    let vector_stats = |pick: &dyn Fn(&VoxelErrors) -> &Vec<f64>| {
        let dim = pick(errors[0]).len();
        let comps: Vec<Vec<f64>> = (0..dim).map(|c| errors.iter().map(|e| pick(e)[c]).collect()).collect();
        let var = comps.iter().map(|c| variance(c)).sum::<f64>() / dim as f64;
        let m = comps.iter().map(|c| mse(c)).sum::<f64>() / dim as f64;
        (var, m)
    };
    let (dt_var, dt_mse) = vector_stats(&|e| &e.dt);
    let (kt_var, kt_mse) = vector_stats(&|e| &e.kt);
    let var = MetricErrors {
        md: variance(&col(0)),
        fa: variance(&col(1)),
        mk: variance(&col(2)),
        k_perp: variance(&col(3)),
        dt: dt_var,
        kt: kt_var,
        snr: variance(&col(4)),
    };
    let ms = MetricErrors {
        md: mse(&col(0)),
        fa: mse(&col(1)),
        mk: mse(&col(2)),
        k_perp: mse(&col(3)),
        dt: dt_mse,
        kt: kt_mse,
        snr: mse(&col(4)),
    };
    (var, ms)
}

/// Compares fits with their ground truth, grouping voxels by truth label.
pub fn evaluate(fits: &[FitResult], truths: &[TruthRecord]) -> Result<EvalReport, MetricsError> {
    if fits.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            fits: fits.len(),
            truths: truths.len(),
        });
    }
    if fits.is_empty() {
        return Err(MetricsError::Empty);
    }
    let errors: Vec<VoxelErrors> = fits.iter().zip(truths).map(|(f, t)| voxel_errors(f, t)).collect();

    let mut labels: Vec<&str> = Vec::new();
    for t in truths {
        if !labels.contains(&t.label.as_str()) {
            labels.push(&t.label);
        }
    }
    let groups = labels
        .iter()
        .map(|label| {
            let members: Vec<&VoxelErrors> = errors
                .iter()
                .zip(truths)
                .filter(|(_, t)| t.label == *label)
                .map(|(e, _)| e)
                .collect();
            let (variance, mse) = aggregate(&members);
            GroupStats {
                label: label.to_string(),
                n: members.len(),
                variance,
                mse,
            }
        })
        .collect();
    let all: Vec<&VoxelErrors> = errors.iter().collect();
    let (var, ms) = aggregate(&all);

    let n = fits.len() as f64;
    let pct = |f: &dyn Fn(&FitResult) -> bool| 100.0 * fits.iter().filter(|x| f(x)).count() as f64 / n;
    let times: Vec<f64> = fits.iter().map(|f| f.wall_time_s).collect();
    Ok(EvalReport {
        estimator: fits[0].estimator.name().to_string(),
        n_voxels: fits.len(),
        groups,
        variance: var,
        mse: ms,
        snr_abs_error: mean(&errors.iter().map(|e| e.scalar[4].abs()).collect::<Vec<_>>()),
        violations: ViolationRates {
            d_not_pd_pct: pct(&|f| f.violations.d_not_pd),
            k_negative_pct: pct(&|f| f.violations.k_negative),
            k_above_bound_pct: pct(&|f| f.violations.k_above_bound),
        },
        runtime: RuntimeStats {
            mean_s: mean(&times),
            max_s: times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            min_s: times.iter().copied().fold(f64::INFINITY, f64::min),
            total_s: times.iter().sum(),
        },
        mean_em_iterations: fits.iter().map(|f| f.em_iterations as f64).sum::<f64>() / n,
        non_converged: fits.iter().filter(|f| !f.converged).count(),
    })
}

fn table(out: &mut String, title: &str, rows: &[(String, MetricErrors)]) {
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<14}", "");
    for name in MetricErrors::NAMES {
        let _ = write!(out, "{name:>12}");
    }
    out.push('\n');
    for (label, m) in rows {
        let _ = write!(out, "{label:<14}");
        for v in m.values() {
            let _ = write!(out, "{v:>12.4e}");
        }
        out.push('\n');
    }
}

/// Aligned-column text rendering of several reports (one per estimator): variance by
/// group, overall MSE, constraint violations and runtime.
pub fn render_text(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let rows: Vec<(String, MetricErrors)> = r.groups.iter().map(|g| (g.label.clone(), g.variance)).collect();
        table(&mut out, &format!("Variance of estimation error by group [{}]", r.estimator), &rows);
        out.push('\n');
    }
    let rows: Vec<(String, MetricErrors)> = reports.iter().map(|r| (r.estimator.clone(), r.mse)).collect();
    table(&mut out, "Mean square error", &rows);
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<14}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}{:>12}",
        "Estimator", "#1 %", "#2 %", "#3 %", "RT mean s", "RT max s", "RT min s", "EM iters", "SNR |err|"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<14}{:>12.2}{:>12.2}{:>12.2}{:>12.3e}{:>12.3e}{:>12.3e}{:>12.3}{:>12.3}",
            r.estimator,
            r.violations.d_not_pd_pct,
            r.violations.k_negative_pct,
            r.violations.k_above_bound_pct,
            r.runtime.mean_s,
            r.runtime.max_s,
            r.runtime.min_s,
            r.mean_em_iterations,
            r.snr_abs_error
        );
    }
    out
}
