//! Synthetic voxels: biexponential ROI presets, random full-tensor ground truth and Rician
//! corruption.
//!
//! Ground truth diffusivities are stored in μm²/ms (10⁻³ mm²/s), matching the internal
//! b-value unit of ms/μm².

use nalgebra::{Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimators::VoxelData;
use crate::linalg::{rotation_from_uniforms, vec6_from_sym3, Vec15, Vec6};
use crate::metrics::{fibonacci_hemisphere, fibonacci_sphere, N_DIR};
use crate::protocol::{AcquisitionProtocol, DesignMatrices, B_INTERNAL_SCALE};
use crate::rician::{sample_magnitude, RicianError};
use crate::tensor::{kurtosis_from_gram, DiffusionTensor, GramMatrix, KurtosisTensor};

#[derive(Debug, Error, PartialEq)]
pub enum SimulatorError {
    #[error("apparent diffusivity is zero")]
    ZeroDiffusivity,
    #[error("SNR must be positive and finite, got {0}")]
    InvalidSnr(f64),
    #[error("voxel count must be positive")]
    NoVoxels,
    #[error(transparent)]
    Rician(#[from] RicianError),
}

/// Two-compartment parameters, diffusivities in mm²/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiexpParams {
    pub d_in: f64,
    pub d_ex: f64,
    pub f_in: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiPreset {
    pub name: &'static str,
    pub mean: BiexpParams,
    pub spread: BiexpParams,
}

const fn roi(name: &'static str, d_in: [f64; 2], d_ex: [f64; 2], f_in: [f64; 2]) -> RoiPreset {
    RoiPreset {
        name,
        mean: BiexpParams {
            d_in: d_in[0] * 1e-3,
            d_ex: d_ex[0] * 1e-3,
            f_in: f_in[0],
        },
        spread: BiexpParams {
            d_in: d_in[1] * 1e-3,
            d_ex: d_ex[1] * 1e-3,
            f_in: f_in[1],
        },
    }
}

/// Biexponential parameters of six brain regions.
pub const ROI_PRESETS: [RoiPreset; 6] = [
    roi("GM/CSF", [1.479, 0.166], [0.466, 0.017], [0.490, 0.012]),
    roi("GM/WM", [1.142, 0.106], [0.338, 0.027], [0.622, 0.038]),
    roi("TH", [1.320, 0.164], [0.271, 0.040], [0.617, 0.069]),
    roi("PU/GP", [1.609, 0.039], [0.257, 0.026], [0.648, 0.028]),
    roi("FWM", [1.155, 0.046], [0.125, 0.026], [0.648, 0.050]),
    roi("ICWM", [1.215, 0.024], [0.183, 0.009], [0.637, 0.020]),
];

/// The 18-direction electrostatic point set used for the three-shell scenario.
const TABLE_GRADIENTS: [[f64; 3]; 18] = [
    [0.737068, -0.568030, 0.366160],
    [0.795763, 0.431108, 0.425331],
    [-0.822530, 0.367692, 0.433874],
    [0.000650, 0.985575, 0.169239],
    [0.228998, 0.150756, 0.961682],
    [-0.412439, -0.753502, 0.511984],
    [-0.358616, 0.232844, 0.903979],
    [-0.891249, -0.417614, 0.176844],
    [0.319924, -0.498679, 0.805586],
    [0.309857, 0.667672, 0.676907],
    [0.579701, -0.807043, -0.112374],
    [-0.209598, -0.358489, 0.909700],
    [0.990653, -0.112342, 0.077367],
    [0.153276, -0.903274, 0.400754],
    [0.530172, 0.845386, 0.065124],
    [-0.282930, 0.716688, 0.637423],
    [0.720077, -0.052737, 0.691887],
    [-0.733882, -0.178601, 0.655377],
];

/// The built-in 18 directions, renormalized to unit length.
pub fn builtin_gradients() -> Vec<Vector3<f64>> {
    TABLE_GRADIENTS
        .iter()
        .map(|g| Vector3::new(g[0], g[1], g[2]).normalize())
        .collect()
}

/// `(D_app, K_app)` of the two-compartment model; `D_app` in the units of the input.
pub fn biexp_apparent(p: &BiexpParams) -> Result<(f64, f64), SimulatorError> {
    let d_app = p.f_in * p.d_in + (1.0 - p.f_in) * p.d_ex;
    if d_app == 0.0 {
        return Err(SimulatorError::ZeroDiffusivity);
    }
    let k_app = 3.0 * p.f_in * (1.0 - p.f_in) * (p.d_in - p.d_ex).powi(2) / (d_app * d_app);
    Ok((d_app, k_app))
}

/// Largest b (in the reciprocal unit of the diffusivities) for which `K_app ≤ 3/(b·D_app)`
/// holds in every region; `+∞` if no region has positive kurtosis.
pub fn max_b(rois: &[BiexpParams]) -> Result<f64, SimulatorError> {
    let mut best = f64::INFINITY;
    for p in rois {
        let (d, k) = biexp_apparent(p)?;
        if d * k > 0.0 {
            best = best.min(3.0 / (d * k));
        }
    }
    Ok(best)
}

/// Index of the region attaining [`max_b`].
pub fn max_b_minimizer(rois: &[BiexpParams]) -> Option<usize> {
    rois.iter()
        .enumerate()
        .filter_map(|(i, p)| biexp_apparent(p).ok().map(|(d, k)| (i, d * k)))
        .filter(|(_, dk)| *dk > 0.0)
        .min_by(|a, b| (3.0 / a.1).total_cmp(&(3.0 / b.1)))
        .map(|(i, _)| i)
}

/// Ground truth of one voxel, diffusivities in μm²/ms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthVoxel {
    Isotropic { d_app: f64, k_app: f64 },
    Tensor { theta_d: [f64; 6], theta_w: [f64; 15] },
}

impl GroundTruthVoxel {
    /// `(θ_D, W)`.
    pub fn tensors(&self) -> (DiffusionTensor, KurtosisTensor) {
        match *self {
            GroundTruthVoxel::Isotropic { d_app, k_app } => {
                (DiffusionTensor::isotropic(d_app), KurtosisTensor::isotropic(k_app))
            }
            GroundTruthVoxel::Tensor { theta_d, theta_w } => {
                (DiffusionTensor(Vec6::from(theta_d)), KurtosisTensor(Vec15::from(theta_w)))
            }
        }
    }

    /// Isotropic truth for a region preset.
    pub fn from_roi(p: &BiexpParams) -> Result<Self, SimulatorError> {
        let (d, k) = biexp_apparent(p)?;
        Ok(GroundTruthVoxel::Isotropic {
            d_app: d / B_INTERNAL_SCALE,
            k_app: k,
        })
    }
}

/// Noise-free signals `S0·exp(Z_D θ_D + Z_W MD²W)` and whether constraint #3 fails at some
/// acquisition (the signal is then not monotone in b).
pub fn noise_free_signal(gt: &GroundTruthVoxel, design: &DesignMatrices, s0: f64) -> (Vec<f64>, bool) {
    let mut violated = false;
    let signal = match *gt {
        GroundTruthVoxel::Isotropic { d_app, k_app } => (0..design.len())
            .map(|j| {
                let b = design.b[j];
                if b > 0.0 && k_app > 3.0 / (b * d_app) {
                    violated = true;
                }
                s0 * (-b * d_app + b * b * d_app * d_app * k_app / 6.0).exp()
            })
            .collect(),
        GroundTruthVoxel::Tensor { .. } => {
            let (td, w) = gt.tensors();
            let md = td.mean_diffusivity();
            let scaled = w.0 * (md * md);
            (0..design.len())
                .map(|j| {
                    let b = design.b[j];
                    if b > 0.0 {
                        let d_app = td.apparent(&design.g[j]);
                        if md * md * w.contract(&design.g[j]) > 3.0 * d_app / b {
                            violated = true;
                        }
                    }
                    s0 * (design.z_d_row(j).dot(&td.0) + design.z_w_row(j).dot(&scaled)).exp()
                })
                .collect()
        }
    };
    (signal, violated)
}

/// Rician-corrupted magnitudes. Returns the data and the constraint #3 warning flag.
pub fn simulate_voxel<R: Rng + ?Sized>(
    gt: &GroundTruthVoxel,
    design: &DesignMatrices,
    s0: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<(VoxelData, bool), SimulatorError> {
    let (s, violated) = noise_free_signal(gt, design, s0);
    let y = s
        .iter()
        .map(|&x| sample_magnitude(x, sigma, rng))
        .collect::<Result<Vec<_>, _>>()?;
    let data = VoxelData::new(y).expect("magnitudes are non-negative");
    Ok((data, violated))
}

/// Random full-tensor truth: `D` with eigenvalues uniform in [0.2, 2.2] μm²/ms and a
/// random orientation, `W` from a random rank-3 Gram matrix scaled to a mean kurtosis
/// drawn from [0.4, 1.2], then shrunk if needed so that `K_app` stays below 90% of
/// `3/(b_max·D_app)` in every direction.
pub fn random_tensor_truth<R: Rng + ?Sized>(rng: &mut R, b_max: f64) -> GroundTruthVoxel {
    let r = rotation_from_uniforms(rng.random(), rng.random(), rng.random());
    let e = Vector3::from_fn(|_, _| rng.random_range(0.2..2.2));
    let d = DiffusionTensor(vec6_from_sym3(&(r * Matrix3::from_diagonal(&e) * r.transpose())));
    let q = SMatrix::<f64, 6, 3>::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let w = kurtosis_from_gram(&GramMatrix(q * q.transpose()));

    let md = d.mean_diffusivity();
    let dirs = fibonacci_sphere(N_DIR);
    let kapp = |w: &KurtosisTensor, g: &Vector3<f64>| (md / d.apparent(g)).powi(2) * w.contract(g);
    let mk: f64 = dirs.iter().map(|g| kapp(&w, g)).sum::<f64>() / dirs.len() as f64;
    let target = rng.random_range(0.4..1.2);
    let mut scale = target / mk;
    if b_max > 0.0 {
        for g in &dirs {
            let bound = 0.9 * 3.0 / (b_max * d.apparent(g));
            let k = scale * kapp(&w, g);
            if k > bound {
                scale *= bound / k;
            }
        }
    }
    let w = KurtosisTensor(w.0 * scale);
    GroundTruthVoxel::Tensor {
        theta_d: d.0.into(),
        theta_w: w.0.into(),
    }
}

/// Ground truth and noise level of one simulated voxel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    /// Grouping label (ROI name or SNR level).
    pub label: String,
    pub truth: GroundTruthVoxel,
    pub s0: f64,
    pub sigma: f64,
    pub snr: f64,
    /// Constraint #3 fails for this truth at some acquisition.
    #[serde(default)]
    pub bound_violated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Six isotropic ROI voxels on six shells × 30 directions.
    Dataset1,
    /// Random full tensors on the dataset-1 protocol.
    Dataset2,
    /// Random full tensors on three shells × the 18 built-in directions, SNR rising from 8
    /// to 40 in steps of 4 every 20 voxels.
    Dataset3,
    /// Random full tensors on a user protocol.
    Custom,
}

impl std::str::FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dataset1" => Ok(Scenario::Dataset1),
            "dataset2" => Ok(Scenario::Dataset2),
            "dataset3" => Ok(Scenario::Dataset3),
            "custom" => Ok(Scenario::Custom),
            other => Err(format!("unknown scenario `{other}`")),
        }
    }
}

/// Shells (s/mm²) of the dataset-1/2 protocol.
pub const DATASET1_SHELLS: [f64; 6] = [62.0, 249.0, 560.0, 996.0, 1556.0, 2240.0];
/// Directions per shell of the dataset-1/2 protocol.
pub const DATASET1_DIRECTIONS: usize = 30;
/// Shells (s/mm²) of the dataset-3 protocol.
pub const DATASET3_SHELLS: [f64; 3] = [500.0, 1000.0, 1500.0];

pub fn dataset1_protocol() -> AcquisitionProtocol {
    AcquisitionProtocol::from_shells(&DATASET1_SHELLS, &fibonacci_hemisphere(DATASET1_DIRECTIONS))
        .expect("lattice directions are unit")
}

pub fn dataset3_protocol() -> AcquisitionProtocol {
    AcquisitionProtocol::from_shells(&DATASET3_SHELLS, &builtin_gradients()).expect("table directions are unit")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub seed: u64,
    /// Fixed SNR; `None` uses the scenario default (15, or the ramp for dataset 3).
    pub snr: Option<f64>,
    /// Voxel count override (dataset 1: Monte-Carlo repeats per ROI).
    pub voxels: Option<usize>,
    /// Protocol for [`Scenario::Custom`].
    pub protocol: Option<AcquisitionProtocol>,
    pub s0: f64,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            seed,
            snr: None,
            voxels: None,
            protocol: None,
            s0: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub protocol: AcquisitionProtocol,
    pub voxels: Vec<VoxelData>,
    pub truths: Vec<TruthRecord>,
}

/// Independent generator for voxel `index`.
pub fn voxel_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Default SNR of the dataset-3 ramp for voxel `index`.
pub fn dataset3_snr(index: usize) -> f64 {
    8.0 + 4.0 * ((index / 20) % 9) as f64
}

pub fn simulate_scenario(config: &ScenarioConfig) -> Result<SimulatedDataset, SimulatorError> {
    if let Some(snr) = config.snr {
        if !(snr > 0.0 && snr.is_finite()) {
            return Err(SimulatorError::InvalidSnr(snr));
        }
    }
    if config.voxels == Some(0) {
        return Err(SimulatorError::NoVoxels);
    }
    let protocol = match config.scenario {
        Scenario::Dataset1 | Scenario::Dataset2 => dataset1_protocol(),
        Scenario::Dataset3 => dataset3_protocol(),
        Scenario::Custom => config.protocol.clone().unwrap_or_else(dataset1_protocol),
    };
    let design = protocol.internal_design();
    let b_max = design.b.max();
    let count = match config.scenario {
        Scenario::Dataset1 => ROI_PRESETS.len() * config.voxels.unwrap_or(1),
        Scenario::Dataset2 => config.voxels.unwrap_or(18),
        Scenario::Dataset3 => config.voxels.unwrap_or(180),
        Scenario::Custom => config.voxels.unwrap_or(18),
    };

    let mut voxels = Vec::with_capacity(count);
    let mut truths = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = voxel_rng(config.seed, index);
        let (truth, label, snr) = match config.scenario {
            Scenario::Dataset1 => {
                let preset = &ROI_PRESETS[index % ROI_PRESETS.len()];
                let snr = config.snr.unwrap_or(15.0);
                (GroundTruthVoxel::from_roi(&preset.mean)?, preset.name.to_string(), snr)
            }
            Scenario::Dataset3 => {
                let snr = config.snr.unwrap_or_else(|| dataset3_snr(index));
                (random_tensor_truth(&mut rng, b_max), format!("SNR {snr}"), snr)
            }
            Scenario::Dataset2 | Scenario::Custom => {
                let snr = config.snr.unwrap_or(15.0);
                (random_tensor_truth(&mut rng, b_max), format!("voxel {index}"), snr)
            }
        };
        let sigma = config.s0 / snr;
        let (data, bound_violated) = simulate_voxel(&truth, &design, config.s0, sigma, &mut rng)?;
        voxels.push(data);
        truths.push(TruthRecord {
            label,
            truth,
            s0: config.s0,
            sigma,
            snr,
            bound_violated,
        });
    }
    Ok(SimulatedDataset {
        protocol,
        voxels,
        truths,
    })
}
