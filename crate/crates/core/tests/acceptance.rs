//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test --release -p dki-core --test acceptance`.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DVector, Matrix3, SMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use dki::estimators::{
    constraint_curvature_l, em_estep, fit, init_params, max_constraint, wls_fit, CwlsLProblem, CwlsQProblem,
    EmLProblem, EmQProblem, FitOptions, FitResult, SubproblemData, WeightMode,
};
use dki::linalg::{sym3_from_vec6, Vec18, Vec6};
use dki::metrics::evaluate;
use dki::optimizer::BarrierProblem;
use dki::protocol::{build_design, monomials, Acquisition, AcquisitionProtocol, DesignMatrices};
use dki::rician::bessel_ratio;
use dki::simulator::{
    biexp_apparent, dataset1_protocol, max_b, max_b_minimizer, random_tensor_truth, simulate_scenario,
    simulate_voxel, voxel_rng, Scenario, ScenarioConfig, ROI_PRESETS,
};
use dki::tensor::{
    gram_from_kurtosis, jacobian_l, kurtosis_from_gram, predict_signal, theta_d_from_l, CholeskyParams, GramMatrix,
    KurtosisQ, ModelParams,
};
use dki::{EstimatorKind, VoxelData};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn b_max_reproduction() -> Outcome {
    let started = Instant::now();
    let rois: Vec<_> = ROI_PRESETS.iter().map(|r| r.mean).collect();
    let b = max_b(&rois).unwrap();
    let who = ROI_PRESETS[max_b_minimizer(&rois).unwrap()].name;
    let elapsed = started.elapsed();
    outcome(
        (b - 3532.0).abs() <= 5.0 && who == "TH" && within(elapsed, 1e-3),
        format!("max_b = {b:.1} s/mm² (target 3532 ± 5), minimizer {who} (target TH), {elapsed:?}"),
    )
}

fn biexp_oracle() -> Outcome {
    let th = ROI_PRESETS.iter().find(|r| r.name == "TH").unwrap();
    let (d, k) = biexp_apparent(&th.mean).unwrap();
    outcome(
        (d - 0.9182e-3).abs() < 5e-8 && (k - 0.9254).abs() <= 1e-3,
        format!("TH: D_app = {d:.5e} mm²/s, K_app = {k:.5}"),
    )
}

fn noiseless_identifiability() -> Outcome {
    let started = Instant::now();
    let design = dataset1_protocol().internal_design();
    let b_max = design.b.max();
    let opts = FitOptions::default();
    let worst: Vec<(f64, f64, f64)> = (0..50)
        .into_par_iter()
        .map(|i| {
            let mut rng = voxel_rng(2024, i);
            let truth = random_tensor_truth(&mut rng, b_max);
            let (td, tw) = truth.tensors();
            let (data, _) = simulate_voxel(&truth, &design, 1.0, 1e-9, &mut rng).unwrap();
            let mut w = (0.0f64, 0.0f64, 0.0f64);
            for kind in EstimatorKind::ALL {
                let f = fit(kind, &data, &design, &opts).unwrap();
                w.0 = w.0.max(rel(f.theta_d.0.as_slice(), td.0.as_slice()));
                w.1 = w.1.max(rel(f.kurtosis.0.as_slice(), tw.0.as_slice()));
                w.2 = w.2.max((f.s0 - 1.0).abs());
            }
            w
        })
        .collect();
    let elapsed = started.elapsed();
    let d = worst.iter().map(|w| w.0).fold(0.0, f64::max);
    let k = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let s = worst.iter().map(|w| w.2).fold(0.0, f64::max);
    outcome(
        d <= 1e-5 && k <= 1e-5 && s <= 1e-5 && within(elapsed, 60.0),
        format!("worst relative error θ_D {d:.2e}, W {k:.2e}, S0 {s:.2e} over 50 voxels × 3 estimators in {elapsed:.1?}"),
    )
}

fn em_ascent() -> Outcome {
    let started = Instant::now();
    let design = dataset1_protocol().internal_design();
    let b_max = design.b.max();
    let opts = FitOptions::default();
    let fits: Vec<FitResult> = (0..50)
        .into_par_iter()
        .map(|i| {
            let mut rng = voxel_rng(77, i);
            let snr = 8.0 + 32.0 * i as f64 / 49.0;
            let truth = random_tensor_truth(&mut rng, b_max);
            let (data, _) = simulate_voxel(&truth, &design, 1.0, 1.0 / snr, &mut rng).unwrap();
            fit(EstimatorKind::Mle, &data, &design, &opts).unwrap()
        })
        .collect();
    let elapsed = started.elapsed();
    let worst_gain = fits
        .iter()
        .flat_map(|f| f.surrogate_gains.iter().copied())
        .fold(f64::INFINITY, f64::min);
    let mean_iter = fits.iter().map(|f| f.em_iterations as f64).sum::<f64>() / fits.len() as f64;
    outcome(
        worst_gain >= -1e-8 && (3.0..=12.0).contains(&mean_iter) && within(elapsed, 120.0),
        format!("smallest per-sweep surrogate change {worst_gain:.2e}, mean EM iterations {mean_iter:.2} in {elapsed:.1?}"),
    )
}

/// Fourth-order central difference of a scalar function along coordinate `i`.
fn fd<F: Fn(&DVector<f64>) -> f64>(f: &F, x: &DVector<f64>, i: usize) -> f64 {
    let h = 1e-4 * x[i].abs().max(1e-2);
    let at = |t: f64| {
        let mut y = x.clone();
        y[i] += t;
        f(&y)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

fn fd_gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |i, _| fd(&f, x, i))
}

fn rel_dv(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

fn fd_hessian(p: &dyn BarrierProblem, x: &DVector<f64>) -> nalgebra::DMatrix<f64> {
    let n = x.len();
    let mut h = nalgebra::DMatrix::zeros(n, n);
    for r in 0..n {
        let g = fd_gradient(|t| p.gradient(t)[r], x);
        h.set_row(r, &g.transpose());
    }
    h
}

fn derivative_checks() -> Outcome {
    let started = Instant::now();
    let design = dataset1_protocol().internal_design();
    let b_max = design.b.max();
    let none = |p: &dyn BarrierProblem| DVector::zeros(p.n_constraints());
    let mut worst_grad = 0.0f64;
    let mut worst_hess = 0.0f64;
    for i in 0..20 {
        let mut rng = voxel_rng(5, i);
        let truth = random_tensor_truth(&mut rng, b_max);
        let (data, _) = simulate_voxel(&truth, &design, 1.0, 1.0 / 20.0, &mut rng).unwrap();
        let wls = wls_fit(&data, &design, WeightMode::NormalizedSignalSquared).unwrap();
        let mut p = init_params(&wls, &design);
        // move off the near-stationary start so gradients are not dominated by rounding
        p.l.0 += Vec6::from_fn(|_, _| 0.05 * rng.random_range(-1.0..1.0));
        p.theta_q.0 += Vec18::from_fn(|_, _| 0.05 * rng.random_range(-1.0..1.0));
        let st = em_estep(&p, &data, &design);
        let em = SubproblemData::new(&design, &data.y, p.s0, p.sigma2).with_state(&st.cos_phi, &st.one_minus_cos_phi);
        let cw = SubproblemData::new(&design, &data.y, p.s0, p.sigma2);
        let l = DVector::from_column_slice(p.l.0.as_slice());
        let q = DVector::from_column_slice(p.theta_q.0.as_slice());

        let problems: [(&dyn BarrierProblem, &DVector<f64>, bool); 4] = [
            (&EmLProblem { data: &em, theta_q: p.theta_q.0 }, &l, false),
            (&EmQProblem { data: &em, l: p.l.0 }, &q, false),
            (&CwlsLProblem { data: &cw, theta_q: p.theta_q.0 }, &l, true),
            (&CwlsQProblem { data: &cw, l: p.l.0 }, &q, true),
        ];
        for (prob, x, exact_hessian) in problems {
            let g = prob.gradient(x);
            worst_grad = worst_grad.max(rel_dv(&g, &fd_gradient(|t| prob.objective(t), x)));
            if exact_hessian {
                let h = prob.information(x, &none(prob));
                let hf = fd_hessian(prob, x);
                worst_hess = worst_hess.max((&h - &hf).norm() / hf.norm());
            }
        }

        // J_L column by column
        let lc = p.l;
        let jl = jacobian_l(&lc);
        for r in 0..6 {
            let row = fd_gradient(|t| theta_d_from_l(&CholeskyParams(Vec6::from_column_slice(t.as_slice()))).0[r], &l);
            let an = DVector::from_iterator(6, jl.row(r).iter().copied());
            worst_grad = worst_grad.max(rel_dv(&an, &row).min((&an - &row).norm()));
        }

        // constraint curvature M_Dj against the derivative of its gradient
        let prob = CwlsLProblem { data: &cw, theta_q: p.theta_q.0 };
        for (r, &j) in design.weighted_rows().iter().enumerate().step_by(17) {
            let m = constraint_curvature_l(&design.z_d_row(j), design.b[j]);
            let mut fdm = nalgebra::DMatrix::zeros(6, 6);
            for c in 0..6 {
                let col = fd_gradient(|t| prob.constraint_jacobian(t)[(r, c)], &l);
                fdm.set_row(c, &col.transpose());
            }
            let an = nalgebra::DMatrix::from_iterator(6, 6, m.iter().copied());
            worst_hess = worst_hess.max((&an - &fdm).norm() / fdm.norm());
        }
    }
    let elapsed = started.elapsed();
    outcome(
        worst_grad <= 1e-6 && worst_hess <= 1e-4 && within(elapsed, 30.0),
        format!("worst relative gradient/Jacobian error {worst_grad:.2e}, Hessian error {worst_hess:.2e} at 20 points in {elapsed:.1?}"),
    )
}

fn constraint_suite() -> Outcome {
    let design = dataset1_protocol().internal_design();
    let b_max = design.b.max();
    let opts = FitOptions::default();
    let fits: Vec<FitResult> = (0..100)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = voxel_rng(31, i);
            let truth = random_tensor_truth(&mut rng, b_max);
            let snr = [5.0, 10.0, 15.0, 30.0][i % 4];
            let (data, _) = simulate_voxel(&truth, &design, 1.0, 1.0 / snr, &mut rng).unwrap();
            [EstimatorKind::Cwls, EstimatorKind::Mle]
                .map(|k| fit(k, &data, &design, &opts).unwrap())
                .into_iter()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dirs: Vec<Vector3<f64>> = (0..1000)
        .map(|_| Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize())
        .collect();
    let converged: Vec<&FitResult> = fits.iter().filter(|f| f.converged).collect();
    let mut min_eig = f64::INFINITY;
    let mut min_quartic = f64::INFINITY;
    let mut max_g = f64::NEG_INFINITY;
    for f in &converged {
        min_eig = min_eig.min(f.theta_d.matrix().symmetric_eigenvalues().min());
        for g in &dirs {
            min_quartic = min_quartic.min(f.scaled_kurtosis.contract(g));
        }
        max_g = max_g.max(max_constraint(f.params.as_ref().unwrap(), &design));
    }
    outcome(
        converged.len() >= 100 && min_eig > -1e-10 && min_quartic >= -1e-10 && max_g <= 1e-8,
        format!(
            "{} of {} fits converged; min eig(D) {min_eig:.2e}, min vᵀGv {min_quartic:.2e}, max g_j {max_g:.2e}",
            converged.len(),
            fits.len()
        ),
    )
}

fn median(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len();
    if n % 2 == 1 {
        x[n / 2]
    } else {
        0.5 * (x[n / 2 - 1] + x[n / 2])
    }
}

fn fit_all(voxels: &[VoxelData], design: &DesignMatrices, kind: EstimatorKind) -> Vec<FitResult> {
    let opts = FitOptions::default();
    voxels.par_iter().map(|v| fit(kind, v, design, &opts).unwrap()).collect()
}

fn estimator_ordering() -> Outcome {
    let seeds = 10u64;
    let mut mk = [Vec::new(), Vec::new(), Vec::new()];
    let mut dt = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..seeds {
        let mut cfg = ScenarioConfig::new(Scenario::Dataset2, 1000 + seed);
        cfg.snr = Some(15.0);
        cfg.voxels = Some(18);
        let ds = simulate_scenario(&cfg).unwrap();
        let design = ds.protocol.internal_design();
        for (k, kind) in EstimatorKind::ALL.into_iter().enumerate() {
            let report = evaluate(&fit_all(&ds.voxels, &design, kind), &ds.truths).unwrap();
            mk[k].push(report.mse.mk);
            dt[k].push(report.mse.dt);
        }
    }
    let [mk_wls, _, mk_mle] = mk.map(median);
    let [_, dt_cwls, dt_mle] = dt.map(median);
    outcome(
        mk_mle < mk_wls && dt_mle <= dt_cwls,
        format!(
            "median MK-MSE MLE {mk_mle:.3e} vs WLS {mk_wls:.3e}; median DT-MSE MLE {dt_mle:.3e} vs CWLS {dt_cwls:.3e} (18 voxels × {seeds} seeds)"
        ),
    )
}

fn low_snr_estimation() -> Outcome {
    let mut errs = [0.0f64; 2];
    let mut n = 0usize;
    for seed in 0..5u64 {
        let mut cfg = ScenarioConfig::new(Scenario::Dataset3, 500 + seed);
        // the first 40 voxels of the ramp sit at SNR 8 and 12
        cfg.voxels = Some(40);
        let ds = simulate_scenario(&cfg).unwrap();
        let design = ds.protocol.internal_design();
        for (slot, kind) in [EstimatorKind::Wls, EstimatorKind::Mle].into_iter().enumerate() {
            let fits = fit_all(&ds.voxels, &design, kind);
            for (f, t) in fits.iter().zip(&ds.truths) {
                assert!(t.snr <= 12.0);
                errs[slot] += (f.snr() - t.snr).abs();
            }
        }
        n += ds.voxels.len();
    }
    let [wls, mle] = errs.map(|e| e / n as f64);
    outcome(
        mle < wls,
        format!("mean |SNR error| at SNR ≤ 12: MLE {mle:.3} vs WLS {wls:.3} over 5 seeds"),
    )
}

/// Signal from the full fourth-order contraction `S0·exp(−b gᵀDg + b²MD²/6·ΣW g g g g)`.
fn signal_tensor_form(d: &Matrix3<f64>, w_full: &[[[[f64; 3]; 3]; 3]; 3], s0: f64, b: f64, g: &Vector3<f64>) -> f64 {
    let md = d.trace() / 3.0;
    let mut quartic = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                for l in 0..3 {
                    quartic += w_full[i][j][k][l] * g[i] * g[j] * g[k] * g[l];
                }
            }
        }
    }
    s0 * (-b * (g.transpose() * d * g)[0] + b * b * md * md * quartic / 6.0).exp()
}

fn representation_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_signal = 0.0f64;
    for _ in 0..1000 {
        let l = Vec6::from_fn(|i, _| if i < 3 { rng.random_range(0.3..1.5) } else { rng.random_range(-0.5..0.5) });
        let theta_q = Vec18::from_fn(|_, _| rng.random_range(-0.3..0.3));
        let params = ModelParams {
            l: CholeskyParams(l),
            theta_q: KurtosisQ(theta_q),
            s0: rng.random_range(0.5..2.0),
            sigma2: 1.0,
        };
        let g = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let b = rng.random_range(0.0..3.0);
        let protocol = AcquisitionProtocol::new(vec![Acquisition::new(b * 1e3, [g[0], g[1], g[2]])]).unwrap();
        let design = build_design(&protocol.with_scaled_b(1e-3));
        let fast = predict_signal(&params, &design).signal[0];
        let d = sym3_from_vec6(&params.theta_d().0);
        let w = params.kurtosis().unwrap().to_full();
        let slow = signal_tensor_form(&d, &w, params.s0, design.b[0], &design.g[0]);
        worst_signal = worst_signal.max((fast - slow).abs() / slow.abs());
    }

    let mut worst_gram = 0.0f64;
    for _ in 0..200 {
        let q = SMatrix::<f64, 6, 3>::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        let gram = GramMatrix(q * q.transpose());
        let w = kurtosis_from_gram(&gram);
        let back = gram_from_kurtosis(&w.0);
        for _ in 0..10 {
            let g = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let v = monomials(&g);
            let poly = (v.transpose() * gram.0 * v)[0];
            let scale = gram.0.norm();
            worst_gram = worst_gram.max((w.contract(&g) - poly).abs() / scale);
            worst_gram = worst_gram.max(((v.transpose() * back.0 * v)[0] - poly).abs() / scale);
        }
    }
    outcome(
        worst_signal <= 1e-10 && worst_gram <= 1e-12,
        format!("worst relative signal mismatch {worst_signal:.2e} over 1000 draws; Gram polynomial identity {worst_gram:.2e}"),
    )
}

/// `I1(x)/I0(x)` by backward recurrence of the Gauss continued fraction.
fn ratio_oracle(x: f64) -> f64 {
    let n = (x + 60.0 + 10.0 * x.sqrt()) as usize;
    let mut r = 0.0;
    for k in (1..=n).rev() {
        r = 1.0 / (2.0 * k as f64 / x + r);
    }
    r
}

fn bessel_kernel() -> Outcome {
    let mut worst = 0.0f64;
    let mut monotone = true;
    let mut bounded = true;
    let mut prev = 0.0;
    let steps = 600;
    for i in 0..=steps {
        let x = 10f64.powf(-6.0 + 12.0 * i as f64 / steps as f64);
        let a = bessel_ratio(x).unwrap();
        worst = worst.max((a - ratio_oracle(x)).abs());
        monotone &= a >= prev;
        bounded &= (0.0..1.0).contains(&a);
        prev = a;
    }
    outcome(
        worst <= 1e-10 && monotone && bounded,
        format!("worst |A − oracle| {worst:.2e} on 601 log-spaced points, monotone {monotone}, in [0,1) {bounded}"),
    )
}

fn main() -> ExitCode {
    // `cargo test -- --list` and similar harness probes
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("b_max reproduction", b_max_reproduction),
        ("biexponential oracle", biexp_oracle),
        ("noiseless identifiability", noiseless_identifiability),
        ("EM ascent", em_ascent),
        ("gradient/Hessian correctness", derivative_checks),
        ("constraint suite", constraint_suite),
        ("estimator ordering", estimator_ordering),
        ("low-SNR SNR estimation", low_snr_estimation),
        ("representation identity", representation_identity),
        ("Bessel kernel", bessel_kernel),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
