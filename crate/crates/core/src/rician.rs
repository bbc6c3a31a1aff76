//! Rician magnitude density, the Von Mises phase posterior and the augmented likelihood.
//!
//! All density code works in log space with exponentially scaled Bessel functions, so
//! arguments `yS/σ²` in the 10⁶ range and beyond (high SNR, small σ) are safe.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::estimators::VoxelData;
use crate::protocol::DesignMatrices;
use crate::tensor::{predict_signal, ModelParams};

/// Below this argument the Bessel functions are summed from their power series, above it
/// the large-argument expansion is used.
pub const SERIES_CUTOFF: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum RicianError {
    #[error("argument must be non-negative, got {0}")]
    NegativeArgument(f64),
    #[error("noise variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("data has {data} samples but the design has {design}")]
    LengthMismatch { data: usize, design: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RicianParams {
    pub s: f64,
    pub sigma2: f64,
}

/// Conditional expectations `⟨cos φ_j⟩` produced by the E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub cos_phi: DVector<f64>,
    /// `1 - ⟨cos φ_j⟩`, kept separately because it underflows in the difference form.
    pub one_minus_cos_phi: DVector<f64>,
}

impl AugmentedState {
    pub fn from_arguments(args: impl ExactSizeIterator<Item = f64>) -> Self {
        let n = args.len();
        let mut cos_phi = DVector::zeros(n);
        let mut rest = DVector::zeros(n);
        for (j, x) in args.enumerate() {
            let (a, c) = ratio_and_complement(x.max(0.0));
            cos_phi[j] = a;
            rest[j] = c;
        }
        AugmentedState {
            cos_phi,
            one_minus_cos_phi: rest,
        }
    }
}

/// Power series sums of `I0(x)` and `I1(x)`, unscaled.
fn series_i0_i1(x: f64) -> (f64, f64) {
    let y = 0.25 * x * x;
    let (mut t0, mut t1) = (1.0, 0.5 * x);
    let (mut s0, mut s1) = (t0, t1);
    for k in 1..500 {
        let kf = k as f64;
        t0 *= y / (kf * kf);
        t1 *= y / (kf * (kf + 1.0));
        s0 += t0;
        s1 += t1;
        if t0 < 1e-17 * s0 && t1 <= 1e-17 * s1 {
            break;
        }
    }
    (s0, s1)
}

/// Large-argument expansion: returns `(S0, S1, S0 - S1)` where
/// `I_ν(x) ≈ eˣ/√(2πx)·S_ν(x)`.
fn asymptotic_sums(x: f64) -> (f64, f64, f64) {
    let (mut a0, mut a1) = (1.0f64, 1.0f64);
    let (mut s0, mut s1, mut diff) = (1.0, 1.0, 0.0);
    let mut prev = f64::INFINITY;
    let mut sign = 1.0;
    let mut xpow = 1.0;
    for k in 1..200 {
        let kf = k as f64;
        let odd = (2.0 * kf - 1.0).powi(2);
        a0 *= (0.0 - odd) / (8.0 * kf);
        a1 *= (4.0 - odd) / (8.0 * kf);
        sign = -sign;
        xpow *= x;
        let t0 = sign * a0 / xpow;
        let t1 = sign * a1 / xpow;
        let size = t0.abs().max(t1.abs());
        if size > prev {
            break;
        }
        s0 += t0;
        s1 += t1;
        diff += t0 - t1;
        prev = size;
        if size < 1e-17 {
            break;
        }
    }
    (s0, s1, diff)
}

/// `(A(x), 1 - A(x))` with `A = I1/I0`; `x` must be non-negative.
pub(crate) fn ratio_and_complement(x: f64) -> (f64, f64) {
    if x == 0.0 {
        return (0.0, 1.0);
    }
    if x.is_infinite() {
        return (1.0, 0.0);
    }
    if x < SERIES_CUTOFF {
        let (i0, i1) = series_i0_i1(x);
        (i1 / i0, (i0 - i1) / i0)
    } else {
        let (s0, s1, diff) = asymptotic_sums(x);
        (s1 / s0, diff / s0)
    }
}

/// `I1(x)/I0(x)`, the mean resultant length of a Von Mises law with concentration `x`.
pub fn bessel_ratio(x: f64) -> Result<f64, RicianError> {
    if x < 0.0 || x.is_nan() {
        return Err(RicianError::NegativeArgument(x));
    }
    Ok(ratio_and_complement(x).0)
}

/// `1 - I1(x)/I0(x)`, accurate where the ratio itself rounds to one.
pub fn bessel_ratio_complement(x: f64) -> Result<f64, RicianError> {
    if x < 0.0 || x.is_nan() {
        return Err(RicianError::NegativeArgument(x));
    }
    Ok(ratio_and_complement(x).1)
}

/// `ln I0(x)` for `x ≥ 0`.
pub fn log_bessel_i0(x: f64) -> f64 {
    log_bessel_i0_scaled(x) + x
}

/// `ln I0(x) − x`, free of the cancellation that subtracting `x` afterwards would cause.
pub fn log_bessel_i0_scaled(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series_i0_i1(x).0.ln() - x
    } else {
        let (s0, _, _) = asymptotic_sums(x);
        -0.5 * (2.0 * PI * x).ln() + s0.ln()
    }
}

/// Log of the Rician density of a magnitude `y`. An exact zero is treated as a sample
/// whose noise is purely real, giving the Gaussian term `-ln(2πσ²) - S²/(2σ²)`.
pub fn rician_logpdf(y: f64, params: RicianParams) -> Result<f64, RicianError> {
    let RicianParams { s, sigma2 } = params;
    if !(sigma2 > 0.0) {
        return Err(RicianError::NonPositiveVariance(sigma2));
    }
    if y < 0.0 || y.is_nan() {
        return Err(RicianError::NegativeArgument(y));
    }
    if y == 0.0 {
        return Ok(-(2.0 * PI * sigma2).ln() - s * s / (2.0 * sigma2));
    }
    let x = y * s / sigma2;
    Ok(y.ln() - sigma2.ln() - (y - s).powi(2) / (2.0 * sigma2) + log_bessel_i0_scaled(x))
}

/// Log density of the phase given the magnitude: Von Mises with concentration `yS/σ²`.
pub fn vonmises_logpdf(phi: f64, y: f64, s: f64, sigma2: f64) -> Result<f64, RicianError> {
    if !(sigma2 > 0.0) {
        return Err(RicianError::NonPositiveVariance(sigma2));
    }
    let kappa = y * s / sigma2;
    if kappa < 0.0 {
        return Err(RicianError::NegativeArgument(kappa));
    }
    Ok(-kappa * (1.0 - phi.cos()) - (2.0 * PI).ln() - log_bessel_i0_scaled(kappa))
}

/// `⟨cos φ⟩` under the Von Mises phase posterior.
pub fn vonmises_expected_cos(y: f64, s: f64, sigma2: f64) -> Result<f64, RicianError> {
    if !(sigma2 > 0.0) {
        return Err(RicianError::NonPositiveVariance(sigma2));
    }
    bessel_ratio(y * s / sigma2)
}

/// Magnitude of `S + ε_r + iε_i` with independent `N(0, σ²)` components.
pub fn sample_magnitude<R: Rng + ?Sized>(s: f64, sigma: f64, rng: &mut R) -> Result<f64, RicianError> {
    if !(sigma > 0.0) {
        return Err(RicianError::NonPositiveSigma(sigma));
    }
    let er: f64 = rng.sample(StandardNormal);
    let ei: f64 = rng.sample(StandardNormal);
    Ok((s + sigma * er).hypot(sigma * ei))
}

/// Augmented joint log-likelihood with `⟨cos φ_j⟩` in place of `cos φ_j`, constants
/// dropped: `m·ln σ⁻² - (1/2σ²)·Σ {Y² + S_j² - 2⟨cos φ_j⟩ Y_j S_j}`.
pub fn joint_loglik(
    params: &ModelParams,
    data: &VoxelData,
    design: &DesignMatrices,
    state: &AugmentedState,
) -> Result<f64, RicianError> {
    joint_loglik_with_count(params, data, design, state, data.len() as f64)
}

/// As [`joint_loglik`] with the `ln σ⁻²` coefficient given explicitly. With `m - 1` this is
/// the surrogate whose σ² maximiser is the `1/(2(m-1))` update used by the EM fit.
pub fn joint_loglik_with_count(
    params: &ModelParams,
    data: &VoxelData,
    design: &DesignMatrices,
    state: &AugmentedState,
    count: f64,
) -> Result<f64, RicianError> {
    if !(params.sigma2 > 0.0) {
        return Err(RicianError::NonPositiveVariance(params.sigma2));
    }
    if data.len() != design.len() || state.cos_phi.len() != design.len() {
        return Err(RicianError::LengthMismatch {
            data: data.len(),
            design: design.len(),
        });
    }
    let s = predict_signal(params, design).signal;
    let residual: f64 = (0..data.len())
        .map(|j| {
            let y = data.y[j];
            // Y² + S² - 2⟨cos⟩YS written as (Y-S)² + 2YS(1-⟨cos⟩)
            (y - s[j]).powi(2) + 2.0 * y * s[j] * state.one_minus_cos_phi[j]
        })
        .sum();
    Ok(-count * params.sigma2.ln() - residual / (2.0 * params.sigma2))
}

/// Observed-data Rician log-likelihood `Σ_j ln p(Y_j; S_j, σ²)`.
pub fn observed_loglik(params: &ModelParams, data: &VoxelData, design: &DesignMatrices) -> Result<f64, RicianError> {
    if data.len() != design.len() {
        return Err(RicianError::LengthMismatch {
            data: data.len(),
            design: design.len(),
        });
    }
    let s = predict_signal(params, design).signal;
    (0..data.len())
        .map(|j| {
            rician_logpdf(
                data.y[j],
                RicianParams {
                    s: s[j],
                    sigma2: params.sigma2,
                },
            )
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent reference: Gauss continued fraction for I1/I0 evaluated by backward
    /// recurrence from far beyond the argument.
    fn continued_fraction_ratio(x: f64) -> f64 {
        let n = (x + 60.0 + 10.0 * x.sqrt()) as usize;
        let mut r = 0.0;
        for k in (1..=n).rev() {
            r = 1.0 / (2.0 * k as f64 / x + r);
        }
        r
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(bessel_ratio(0.0).unwrap(), 0.0);
        let a1 = bessel_ratio(1.0).unwrap();
        assert!((a1 - 0.446_389_965_896_534_5).abs() < 1e-15, "{a1}");
        let x: f64 = 1e5;
        let asym = 1.0 - 1.0 / (2.0 * x) - 1.0 / (8.0 * x * x) - 1.0 / (8.0 * x.powi(3));
        assert!((bessel_ratio(x).unwrap() - asym).abs() < 1e-15);
        assert!((bessel_ratio_complement(x).unwrap() - 5.000_012_500_125e-6).abs() < 1e-16);
        assert!(bessel_ratio(-1.0).is_err());
    }

    #[test]
    fn series_and_expansion_agree_at_cutoff() {
        for x in [SERIES_CUTOFF - 1e-9, SERIES_CUTOFF, SERIES_CUTOFF + 1e-9, 14.0, 16.0] {
            let (i0, i1) = series_i0_i1(x);
            let (s0, s1, diff) = asymptotic_sums(x);
            assert!((i1 / i0 - s1 / s0).abs() < 1e-12, "{x}");
            assert!(((i0 - i1) / i0 - diff / s0).abs() < 1e-12, "{x}");
            let log_series = i0.ln();
            let log_asym = x - 0.5 * (2.0 * PI * x).ln() + s0.ln();
            assert!((log_series - log_asym).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn matches_continued_fraction() {
        let mut x = 1e-6;
        while x < 1e6 {
            let r = bessel_ratio(x).unwrap();
            let o = continued_fraction_ratio(x);
            assert!((r - o).abs() <= 1e-10 * o.max(1e-300) || (r - o).abs() < 1e-16, "x={x} r={r} o={o}");
            x *= 1.7;
        }
    }

    #[test]
    fn monotone_and_bounded() {
        let mut prev = -1.0;
        let mut x = 0.0;
        while x < 200.0 {
            let r = bessel_ratio(x).unwrap();
            assert!((0.0..1.0).contains(&r));
            assert!(r > prev);
            prev = r;
            x += 0.01;
        }
    }

    #[test]
    fn rayleigh_special_case() {
        let (y, sigma2) = (0.7, 0.3);
        let lp = rician_logpdf(y, RicianParams { s: 0.0, sigma2 }).unwrap();
        assert!((lp - ((y / sigma2).ln() - y * y / (2.0 * sigma2))).abs() < 1e-14);
        let z = rician_logpdf(0.0, RicianParams { s: 0.5, sigma2 }).unwrap();
        assert!((z - (-(2.0 * PI * sigma2).ln() - 0.25 / (2.0 * sigma2))).abs() < 1e-14);
        assert!(rician_logpdf(-1.0, RicianParams { s: 0.5, sigma2 }).is_err());
        assert!(rician_logpdf(1.0, RicianParams { s: 0.5, sigma2: 0.0 }).is_err());
    }

    #[test]
    fn logpdf_matches_direct_series() {
        // y = S = σ² = 1: p = e^{-1} I0(1)
        let i0_1 = 1.266_065_877_752_008_4_f64;
        let lp = rician_logpdf(1.0, RicianParams { s: 1.0, sigma2: 1.0 }).unwrap();
        assert!((lp - (-1.0 + i0_1.ln())).abs() < 1e-12);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn density_integrates_to_one() {
        for (s, sigma) in [(0.0, 1.0), (1.0, 1.0), (3.0, 0.5), (100.0, 2.0), (1.0, 0.01)] {
            let sigma2: f64 = sigma * sigma;
            let f = |y: f64| {
                if y <= 0.0 {
                    0.0
                } else {
                    rician_logpdf(y, RicianParams { s, sigma2 }).unwrap().exp()
                }
            };
            let lo = (s - 12.0 * sigma).max(0.0);
            let total = simpson(f, lo, s + 12.0 * sigma, 20_000);
            assert!((total - 1.0).abs() < 1e-6, "S={s} σ={sigma}: {total}");
        }
    }

    #[test]
    fn vonmises_integrates_to_one() {
        for (y, s, sigma2) in [(1.0, 1.0, 1.0), (2.0, 3.0, 0.1), (0.0, 1.0, 1.0), (10.0, 10.0, 0.5)] {
            let f = |phi: f64| vonmises_logpdf(phi, y, s, sigma2).unwrap().exp();
            let total = simpson(f, 0.0, 2.0 * PI, 20_000);
            assert!((total - 1.0).abs() < 1e-8, "{total}");
            // the first moment is the Bessel ratio
            let m1 = simpson(|p| p.cos() * f(p), 0.0, 2.0 * PI, 20_000);
            assert!((m1 - vonmises_expected_cos(y, s, sigma2).unwrap()).abs() < 1e-8);
        }
    }

    #[test]
    fn expected_cos_limits() {
        assert_eq!(vonmises_expected_cos(1.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((vonmises_expected_cos(1.0, 1.0, 1.0).unwrap() - 0.446_389_965_896_534_5).abs() < 1e-15);
        assert!(vonmises_expected_cos(1.0, 1.0, 1e-12).unwrap() > 1.0 - 1e-11);
    }

    #[test]
    fn sampling_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        assert!((sample_magnitude(0.8, 1e-12, &mut rng).unwrap() - 0.8).abs() < 1e-10);
        assert!(sample_magnitude(1.0, 0.0, &mut rng).is_err());

        let n = 200_000;
        let sigma = 0.5;
        let ys: Vec<f64> = (0..n).map(|_| sample_magnitude(0.0, sigma, &mut rng).unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - sigma * (PI / 2.0).sqrt()).abs() < 3.0 * se);

        // high SNR: E[Y] = √(S² + σ²) up to O(σ⁴/S³)
        let s = 10.0 * sigma;
        let ys: Vec<f64> = (0..n).map(|_| sample_magnitude(s, sigma, &mut rng).unwrap()).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let approx = (s * s + sigma * sigma).sqrt() - sigma.powi(4) / (8.0 * s.powi(3));
        assert!((mean - approx).abs() < 3.0 * se, "{mean} vs {approx} ± {se}");
    }

    #[test]
    fn samples_follow_density() {
        // χ² goodness of fit on 40 equiprobable-ish bins
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (s, sigma) = (1.5, 0.7);
        let n = 100_000;
        let edges: Vec<f64> = (0..=40).map(|i| i as f64 * (s + 6.0 * sigma) / 40.0).collect();
        let mut counts = vec![0usize; 40];
        for _ in 0..n {
            let y = sample_magnitude(s, sigma, &mut rng).unwrap();
            if let Some(k) = edges.windows(2).position(|w| y >= w[0] && y < w[1]) {
                counts[k] += 1;
            }
        }
        let mut chi2 = 0.0;
        let mut dof = 0;
        for k in 0..40 {
            let p = simpson(
                |y| {
                    if y <= 0.0 {
                        0.0
                    } else {
                        rician_logpdf(y, RicianParams { s, sigma2: sigma * sigma }).unwrap().exp()
                    }
                },
                edges[k],
                edges[k + 1],
                200,
            );
            let expected = p * n as f64;
            if expected > 5.0 {
                chi2 += (counts[k] as f64 - expected).powi(2) / expected;
                dof += 1;
            }
        }
        // 99.9% quantile of χ² with ~40 dof is about 73
        assert!(chi2 < 73.0, "chi2 = {chi2} over {dof} bins");
    }
}
