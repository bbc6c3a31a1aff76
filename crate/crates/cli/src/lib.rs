//! Command-line driver: `simulate`, `fit`, `compare` and `metrics`.
//!
//! File formats are described in the repository README. All commands are deterministic for a
//! given seed; `fit` writes records in voxel order whatever the worker count.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dki::estimators::{fit, FitOptions};
use dki::formats::{
    read_fit_lines, read_truth, read_voxel_table, write_fit_lines, write_truth, write_voxel_table, FitRecord,
};
use dki::metrics::{evaluate, render_text, scalar_metrics, EvalReport};
use dki::protocol::load_protocol;
use dki::simulator::{simulate_scenario, Scenario, ScenarioConfig};
use dki::{AcquisitionProtocol, EstimatorKind, FitResult};

/// Seed used when `--seed` is not given.
pub const DEFAULT_SEED: u64 = 20_240_101;

pub const VOXEL_FILE: &str = "voxels.txt";
pub const TRUTH_FILE: &str = "truth.json";
pub const PROTOCOL_FILE: &str = "protocol.txt";

#[derive(Debug, Parser)]
#[command(name = "dki", version, about = "Diffusion kurtosis estimation under Rician noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a scenario and write its voxel table, ground truth and protocol.
    Simulate(SimulateArgs),
    /// Fit every voxel of a table with one or more estimators (JSON lines out).
    Fit(FitArgs),
    /// Score fit outputs against a ground-truth sidecar.
    Compare(CompareArgs),
    /// Per-voxel scalar maps (MD, FA, MK, K⊥, SNR) from a fit output, as CSV.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// dataset1, dataset2, dataset3 or custom.
    #[arg(long)]
    pub scenario: Scenario,
    /// Fixed SNR = S0/σ (default: 15, or the 8→40 ramp for dataset3).
    #[arg(long, conflicts_with = "sigma")]
    pub snr: Option<f64>,
    /// Noise standard deviation; sets SNR = S0/σ.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Voxel count (dataset1: repeats per region).
    #[arg(long)]
    pub voxels: Option<usize>,
    /// Protocol file for the custom scenario (`b gx gy gz` lines or JSON bvals/bvecs).
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub s0: f64,
    /// Directory receiving voxels.txt, truth.json and protocol.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub protocol: PathBuf,
    /// Voxel table.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated list of wls, cwls, mle.
    #[arg(long, value_delimiter = ',', default_value = "mle")]
    pub estimator: Vec<EstimatorKind>,
    #[arg(long)]
    pub output: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "DKI_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Write zero wall times so repeated runs are byte-identical.
    #[arg(long)]
    pub no_timing: bool,
    #[command(flatten)]
    pub overrides: SolverOverrides,
}

/// Optional overrides of the solver and EM settings.
#[derive(Debug, Default, Args)]
pub struct SolverOverrides {
    #[arg(long)]
    pub mu0: Option<f64>,
    #[arg(long)]
    pub mu_shrink: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub grad_tol: Option<f64>,
    #[arg(long)]
    pub em_tol: Option<f64>,
    #[arg(long)]
    pub em_max_iter: Option<usize>,
}

impl SolverOverrides {
    pub fn apply(&self, mut opts: FitOptions) -> Result<FitOptions> {
        let s = &mut opts.solver;
        s.mu0 = self.mu0.unwrap_or(s.mu0);
        s.mu_shrink = self.mu_shrink.unwrap_or(s.mu_shrink);
        s.max_outer = self.max_outer.unwrap_or(s.max_outer);
        s.max_inner = self.max_inner.unwrap_or(s.max_inner);
        s.grad_tol = self.grad_tol.unwrap_or(s.grad_tol);
        s.validate().context("invalid solver options")?;
        if let Some(tol) = self.em_tol {
            ensure!(tol > 0.0, "--em-tol must be positive");
            opts.em.tol_outer = tol;
        }
        if let Some(n) = self.em_max_iter {
            ensure!(n > 0, "--em-max-iter must be positive");
            opts.em.max_outer = n;
        }
        Ok(opts)
    }
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub truth: PathBuf,
    /// One or more fit outputs; records are grouped by estimator.
    #[arg(required = true)]
    pub fits: Vec<PathBuf>,
    /// Emit the reports as JSON instead of tables.
    #[arg(long)]
    pub json: bool,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub fits: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Compare(a) => {
            let text = cmd_compare(&a)?;
            emit(a.output.as_deref(), &text)
        }
        Command::Metrics(a) => {
            let text = cmd_metrics(&a)?;
            emit(a.output.as_deref(), &text)
        }
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_protocol(path: &Path) -> Result<AcquisitionProtocol> {
    load_protocol(&read(path)?).with_context(|| format!("invalid protocol {}", path.display()))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    ensure!(a.s0 > 0.0 && a.s0.is_finite(), "--s0 must be positive");
    let snr = match (a.snr, a.sigma) {
        (_, Some(sigma)) => {
            ensure!(sigma > 0.0 && sigma.is_finite(), "--sigma must be positive, got {sigma}");
            Some(a.s0 / sigma)
        }
        (Some(snr), None) => {
            ensure!(snr > 0.0 && snr.is_finite(), "--snr must be positive, got {snr}");
            Some(snr)
        }
        (None, None) => None,
    };
    if let Some(n) = a.voxels {
        ensure!(n > 0, "--voxels must be positive");
    }
    let protocol = match (&a.protocol, a.scenario) {
        (Some(p), Scenario::Custom) => Some(read_protocol(p)?),
        (Some(_), _) => bail!("--protocol only applies to the custom scenario"),
        (None, _) => None,
    };
    let mut cfg = ScenarioConfig::new(a.scenario, a.seed);
    cfg.snr = snr;
    cfg.voxels = a.voxels;
    cfg.protocol = protocol;
    cfg.s0 = a.s0;
    let ds = simulate_scenario(&cfg)?;

    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    write(&a.out_dir.join(VOXEL_FILE), &write_voxel_table(&ds.voxels, ds.protocol.len()))?;
    write(&a.out_dir.join(TRUTH_FILE), &write_truth(&ds.truths)?)?;
    write(&a.out_dir.join(PROTOCOL_FILE), &ds.protocol.to_text())?;
    eprintln!("{} voxels × {} acquisitions written to {}", ds.voxels.len(), ds.protocol.len(), a.out_dir.display());
    Ok(())
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let protocol = read_protocol(&a.protocol)?;
    let (m, voxels) = read_voxel_table(&read(&a.data)?).with_context(|| format!("invalid voxel table {}", a.data.display()))?;
    ensure!(
        m == protocol.len(),
        "voxel table has {m} values per voxel but the protocol has {} acquisitions",
        protocol.len()
    );
    let opts = a.overrides.apply(FitOptions::default())?;
    let design = protocol.internal_design();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.workers).build()?;

    let mut records = Vec::with_capacity(voxels.len() * a.estimator.len());
    for &kind in &a.estimator {
        let fits: Vec<FitRecord> = pool.install(|| {
            voxels
                .par_iter()
                .enumerate()
                .map(|(i, v)| match fit(kind, v, &design, &opts) {
                    Ok(mut f) => {
                        if a.no_timing {
                            f.wall_time_s = 0.0;
                        }
                        FitRecord::from_fit(i, &f)
                    }
                    Err(e) => FitRecord::failed(i, kind, e.to_string()),
                })
                .collect()
        });
        let failed = fits.iter().filter(|r| r.error.is_some()).count();
        let unconverged = fits.iter().filter_map(|r| r.fit.as_ref()).filter(|f| !f.converged).count();
        eprintln!("{kind}: {} voxels, {failed} failed, {unconverged} not converged", fits.len());
        records.extend(fits);
    }
    write(&a.output, &write_fit_lines(&records)?)
}

/// Voxel index and fit (absent when the fit failed).
type IndexedFits = Vec<(usize, Option<FitResult>)>;

/// Fits from several files grouped by estimator, in first-seen order.
fn grouped_fits(paths: &[PathBuf]) -> Result<Vec<(EstimatorKind, IndexedFits)>> {
    let mut groups: Vec<(EstimatorKind, IndexedFits)> = Vec::new();
    for p in paths {
        let records = read_fit_lines(&read(p)?).with_context(|| format!("invalid fit file {}", p.display()))?;
        ensure!(!records.is_empty(), "{} holds no fit records", p.display());
        for r in records {
            let entry = match groups.iter_mut().position(|(k, _)| *k == r.estimator) {
                Some(i) => &mut groups[i].1,
                None => {
                    groups.push((r.estimator, Vec::new()));
                    &mut groups.last_mut().expect("just pushed").1
                }
            };
            entry.push((r.voxel, r.to_fit()));
        }
    }
    Ok(groups)
}

pub fn compare_reports(a: &CompareArgs) -> Result<Vec<EvalReport>> {
    let truths = read_truth(&read(&a.truth)?).with_context(|| format!("invalid truth file {}", a.truth.display()))?;
    let mut reports = Vec::new();
    for (kind, mut fits) in grouped_fits(&a.fits)? {
        fits.sort_by_key(|(i, _)| *i);
        ensure!(
            fits.len() == truths.len(),
            "{kind}: {} fit records but {} ground-truth voxels",
            fits.len(),
            truths.len()
        );
        for (expected, (i, _)) in fits.iter().enumerate() {
            ensure!(*i == expected, "{kind}: voxel {expected} missing or duplicated");
        }
        // failed voxels are left out of the statistics
        let (ok, kept): (Vec<FitResult>, Vec<_>) = fits
            .into_iter()
            .filter_map(|(i, f)| f.map(|f| (f, truths[i].clone())))
            .unzip();
        ensure!(!ok.is_empty(), "{kind}: every voxel failed");
        reports.push(evaluate(&ok, &kept)?);
    }
    Ok(reports)
}

pub fn cmd_compare(a: &CompareArgs) -> Result<String> {
    let reports = compare_reports(a)?;
    if a.json {
        Ok(serde_json::to_string_pretty(&reports)? + "\n")
    } else {
        Ok(render_text(&reports))
    }
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<String> {
    let records = read_fit_lines(&read(&a.fits)?).with_context(|| format!("invalid fit file {}", a.fits.display()))?;
    ensure!(!records.is_empty(), "{} holds no fit records", a.fits.display());
    let mut out = String::from("voxel,estimator,md,fa,mk,k_perp,snr,valid\n");
    for r in &records {
        let Some(f) = r.to_fit() else { continue };
        let m = scalar_metrics(&f.theta_d, &f.kurtosis, f.s0, f.sigma2);
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{}\n",
            r.voxel, r.estimator, m.md, m.fa, m.mk, m.k_perp, m.snr, m.valid
        ));
    }
    Ok(out)
}
