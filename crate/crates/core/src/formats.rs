//! On-disk formats: voxel tables, ground-truth sidecars and JSON-lines fit records.
//!
//! A voxel table starts with a header line `m=<count>` followed by one line per voxel of
//! `m` comma-separated magnitudes. Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::{ConstraintFlags, EstimatorKind, FitResult, VoxelData};
use crate::linalg::{Vec15, Vec6};
use crate::metrics::{scalar_metrics, ScalarMetrics};
use crate::simulator::TruthRecord;
use crate::tensor::{DiffusionTensor, KurtosisTensor, ModelParams};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("missing `m=<count>` header")]
    MissingHeader,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    RowLength { line: usize, expected: usize, found: usize },
    #[error("ground-truth keys must be 0..n without gaps (missing {0})")]
    TruthIndex(usize),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub fn write_voxel_table(voxels: &[VoxelData], m: usize) -> String {
    let mut out = format!("m={m}\n");
    for v in voxels {
        let row: Vec<String> = v.y.iter().map(|x| format!("{x:?}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_voxel_table(text: &str) -> Result<(usize, Vec<VoxelData>), FormatError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (hline, header) = lines.next().ok_or(FormatError::MissingHeader)?;
    let m: usize = header
        .strip_prefix("m=")
        .ok_or(FormatError::MissingHeader)?
        .trim()
        .parse()
        .map_err(|e| FormatError::Malformed {
            line: hline,
            reason: format!("bad count: {e}"),
        })?;
    let mut voxels = Vec::new();
    for (line, l) in lines {
        let values = l
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FormatError::Malformed {
                line,
                reason: e.to_string(),
            })?;
        if values.len() != m {
            return Err(FormatError::RowLength {
                line,
                expected: m,
                found: values.len(),
            });
        }
        let data = VoxelData::new(values).map_err(|e| FormatError::Malformed {
            line,
            reason: e.to_string(),
        })?;
        voxels.push(data);
    }
    Ok((m, voxels))
}

/// Ground-truth sidecar: a JSON object keyed by voxel index.
pub fn write_truth(truths: &[TruthRecord]) -> Result<String, FormatError> {
    let map: BTreeMap<usize, &TruthRecord> = truths.iter().enumerate().collect();
    Ok(serde_json::to_string_pretty(&map)? + "\n")
}

pub fn read_truth(text: &str) -> Result<Vec<TruthRecord>, FormatError> {
    let map: BTreeMap<usize, TruthRecord> = serde_json::from_str(text)?;
    let mut out = Vec::with_capacity(map.len());
    for (expected, (index, record)) in map.into_iter().enumerate() {
        if index != expected {
            return Err(FormatError::TruthIndex(expected));
        }
        out.push(record);
    }
    Ok(out)
}

/// One line of fit output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub voxel: usize,
    pub estimator: EstimatorKind,
    /// Set when the fit failed; the numeric fields are then absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitFields>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFields {
    pub theta_d: [f64; 6],
    /// Dimensionless `W` in `Z_W` column order.
    pub kurtosis: [f64; 15],
    /// `MD²·W`.
    pub scaled_kurtosis: [f64; 15],
    pub s0: f64,
    pub sigma2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ModelParams>,
    pub metrics: ScalarMetrics,
    pub violations: ConstraintFlags,
    pub converged: bool,
    pub em_iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub surrogate_gains: Vec<f64>,
    pub wall_time_s: f64,
}

impl FitRecord {
    pub fn from_fit(voxel: usize, fit: &FitResult) -> Self {
        FitRecord {
            voxel,
            estimator: fit.estimator,
            error: None,
            fit: Some(FitFields {
                theta_d: fit.theta_d.0.into(),
                kurtosis: fit.kurtosis.0.into(),
                scaled_kurtosis: fit.scaled_kurtosis.0.into(),
                s0: fit.s0,
                sigma2: fit.sigma2,
                params: fit.params,
                metrics: scalar_metrics(&fit.theta_d, &fit.kurtosis, fit.s0, fit.sigma2),
                violations: fit.violations,
                converged: fit.converged,
                em_iterations: fit.em_iterations,
                loglik_trace: fit.loglik_trace.clone(),
                surrogate_gains: fit.surrogate_gains.clone(),
                wall_time_s: fit.wall_time_s,
            }),
        }
    }

    pub fn failed(voxel: usize, estimator: EstimatorKind, error: String) -> Self {
        FitRecord {
            voxel,
            estimator,
            error: Some(error),
            fit: None,
        }
    }

    /// The fit, or `None` for a failed voxel.
    pub fn to_fit(&self) -> Option<FitResult> {
        let f = self.fit.as_ref()?;
        Some(FitResult {
            estimator: self.estimator,
            theta_d: DiffusionTensor(Vec6::from(f.theta_d)),
            kurtosis: KurtosisTensor(Vec15::from(f.kurtosis)),
            scaled_kurtosis: KurtosisTensor(Vec15::from(f.scaled_kurtosis)),
            s0: f.s0,
            sigma2: f.sigma2,
            params: f.params,
            loglik_trace: f.loglik_trace.clone(),
            surrogate_gains: f.surrogate_gains.clone(),
            em_iterations: f.em_iterations,
            violations: f.violations,
            converged: f.converged,
            wall_time_s: f.wall_time_s,
        })
    }
}

pub fn write_fit_lines(records: &[FitRecord]) -> Result<String, FormatError> {
    let mut out = String::new();
    for r in records {
        let _ = writeln!(out, "{}", serde_json::to_string(r)?);
    }
    Ok(out)
}

pub fn read_fit_lines(text: &str) -> Result<Vec<FitRecord>, FormatError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FormatError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate_scenario, Scenario, ScenarioConfig};

    #[test]
    fn voxel_table_round_trip() {
        let ds = simulate_scenario(&ScenarioConfig::new(Scenario::Dataset1, 4)).unwrap();
        let text = write_voxel_table(&ds.voxels, ds.protocol.len());
        assert!(text.starts_with("m=180\n"));
        let (m, back) = read_voxel_table(&text).unwrap();
        assert_eq!(m, 180);
        assert_eq!(back, ds.voxels);
    }

    #[test]
    fn voxel_table_errors() {
        assert!(matches!(read_voxel_table(""), Err(FormatError::MissingHeader)));
        assert!(matches!(read_voxel_table("m=2\n1,2,3\n"), Err(FormatError::RowLength { line: 2, .. })));
        assert!(matches!(read_voxel_table("m=2\n1,x\n"), Err(FormatError::Malformed { line: 2, .. })));
        assert!(matches!(read_voxel_table("m=1\n-1\n"), Err(FormatError::Malformed { .. })));
    }

    #[test]
    fn truth_round_trip() {
        let ds = simulate_scenario(&ScenarioConfig::new(Scenario::Dataset2, 4)).unwrap();
        let text = write_truth(&ds.truths).unwrap();
        assert_eq!(read_truth(&text).unwrap(), ds.truths);
        assert!(read_truth("{\"1\": null}").is_err());
    }
}
