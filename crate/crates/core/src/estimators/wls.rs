use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{constraint_flags, kurtosis_from_scaled, EstimatorError, EstimatorKind, FitResult, VoxelData};
use crate::linalg::{Vec15, Vec6};
use crate::protocol::DesignMatrices;
use crate::tensor::{DiffusionTensor, KurtosisTensor};

/// Columns of `[1 | Z_D | Z_W]`.
pub const WLS_PARAMETERS: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// `w_j = Y_j²`.
    SignalSquared,
    /// `w_j = Y_j²/Ŝ0²` with `Ŝ0` from an unweighted first pass.
    NormalizedSignalSquared,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsOutput {
    pub log_s0: f64,
    pub theta_d: Vec6,
    /// `MD²·W`.
    pub theta_w: Vec15,
    pub sigma2: f64,
    /// Only `b = 0` rows were available, so the tensors are set to zero.
    pub underdetermined: bool,
}

fn solve_weighted(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, usize) {
    let mut xw = x.clone();
    let mut yw = y.clone();
    for i in 0..x.nrows() {
        let s = w[i].sqrt();
        xw.row_mut(i).scale_mut(s);
        yw[i] *= s;
    }
    let svd = xw.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * x.nrows().max(x.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let beta = svd.solve(&yw, tol).expect("both factors were requested");
    (beta, rank)
}

/// Linear least squares of `log Y` on `[1 | Z_D | Z_W]` over the positive samples.
pub fn wls_fit(data: &VoxelData, design: &DesignMatrices, mode: WeightMode) -> Result<WlsOutput, EstimatorError> {
    data.check(design)?;
    let rows: Vec<usize> = (0..data.len()).filter(|&j| data.y[j] > 0.0).collect();
    if rows.is_empty() {
        return Err(EstimatorError::NoPositiveSamples);
    }
    let log_y = DVector::from_iterator(rows.len(), rows.iter().map(|&j| data.y[j].ln()));

    if rows.iter().all(|&j| design.b[j] == 0.0) {
        let weights = DVector::from_iterator(
            rows.len(),
            rows.iter().map(|&j| match mode {
                WeightMode::Uniform => 1.0,
                _ => data.y[j] * data.y[j],
            }),
        );
        let log_s0 = log_y.dot(&weights) / weights.sum();
        let s0 = log_s0.exp();
        let rss: f64 = data.y.iter().map(|y| (y - s0).powi(2)).sum();
        return Ok(WlsOutput {
            log_s0,
            theta_d: Vec6::zeros(),
            theta_w: Vec15::zeros(),
            sigma2: rss / (data.len().max(2) - 1) as f64,
            underdetermined: true,
        });
    }

    let mut x = DMatrix::zeros(rows.len(), WLS_PARAMETERS);
    for (i, &j) in rows.iter().enumerate() {
        x[(i, 0)] = 1.0;
        x.view_mut((i, 1), (1, 6)).copy_from(&design.z_d.row(j));
        x.view_mut((i, 7), (1, 15)).copy_from(&design.z_w.row(j));
    }
    let weights = match mode {
        WeightMode::Uniform => DVector::from_element(rows.len(), 1.0),
        WeightMode::SignalSquared => DVector::from_iterator(rows.len(), rows.iter().map(|&j| data.y[j].powi(2))),
        WeightMode::NormalizedSignalSquared => {
            let (first, _) = solve_weighted(&x, &log_y, &DVector::from_element(rows.len(), 1.0));
            let s0_sq = (2.0 * first[0]).exp();
            DVector::from_iterator(rows.len(), rows.iter().map(|&j| data.y[j].powi(2) / s0_sq))
        }
    };
    let (beta, rank) = solve_weighted(&x, &log_y, &weights);
    if rank < WLS_PARAMETERS {
        return Err(EstimatorError::RankDeficient {
            rank,
            needed: WLS_PARAMETERS,
        });
    }

    let log_s0 = beta[0];
    let theta_d = Vec6::from_iterator(beta.rows(1, 6).iter().copied());
    let theta_w = Vec15::from_iterator(beta.rows(7, 15).iter().copied());
    let rss: f64 = (0..data.len())
        .map(|j| {
            let fitted = (log_s0 + design.z_d_row(j).dot(&theta_d) + design.z_w_row(j).dot(&theta_w)).exp();
            (data.y[j] - fitted).powi(2)
        })
        .sum();
    let dof = data.len().saturating_sub(WLS_PARAMETERS).max(1);
    Ok(WlsOutput {
        log_s0,
        theta_d,
        theta_w,
        sigma2: rss / dof as f64,
        underdetermined: false,
    })
}

pub(crate) fn wls_fit_result(
    data: &VoxelData,
    design: &DesignMatrices,
    mode: WeightMode,
) -> Result<FitResult, EstimatorError> {
    let started = Instant::now();
    let out = wls_fit(data, design, mode)?;
    let theta_d = DiffusionTensor(out.theta_d);
    let scaled = KurtosisTensor(out.theta_w);
    Ok(FitResult {
        estimator: EstimatorKind::Wls,
        theta_d,
        kurtosis: kurtosis_from_scaled(&scaled, &theta_d),
        scaled_kurtosis: scaled,
        s0: out.log_s0.exp(),
        sigma2: out.sigma2,
        params: None,
        loglik_trace: Vec::new(),
        surrogate_gains: Vec::new(),
        em_iterations: 0,
        violations: constraint_flags(&theta_d, &scaled, design),
        converged: !out.underdetermined,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
