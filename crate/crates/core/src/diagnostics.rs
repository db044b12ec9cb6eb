//! Descriptive statistics, normality and stationarity tests, and residual
//! diagnostics for fitted volatility models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{chi2_sf, mean, ols, sample_variance};

/// Significance levels at which every test reports a verdict.
pub const LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

/// Constant-only Dickey-Fuller critical values at 1%, 5% and 10%.
pub const ADF_CRITICAL: [(f64, f64); 3] = [(0.01, -3.43), (0.05, -2.86), (0.10, -2.57)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Reject,
    FailToReject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub statistic: f64,
    /// `None` when only critical-value bands are available (ADF).
    pub p_value: Option<f64>,
    pub lag_order: Option<usize>,
    /// Keyed by significance level formatted as `"0.10"`, `"0.05"`, `"0.01"`.
    pub verdicts: BTreeMap<String, Verdict>,
}

impl TestResult {
    fn from_p_value(test: &str, statistic: f64, p: f64, lag_order: Option<usize>) -> Self {
        let verdicts = LEVELS
            .iter()
            .map(|&a| (level_key(a), if p < a { Verdict::Reject } else { Verdict::FailToReject }))
            .collect();
        TestResult {
            test: test.to_string(),
            statistic,
            p_value: Some(p),
            lag_order,
            verdicts,
        }
    }

    pub fn rejects_at(&self, level: f64) -> bool {
        self.verdicts.get(&level_key(level)) == Some(&Verdict::Reject)
    }
}

fn level_key(a: f64) -> String {
    format!("{a:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub std_dev: f64,
    /// Undefined (None) for a constant vector.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
}

/// Central moment ratios (skewness, kurtosis) with `n` denominators, or None when
/// the input has no spread.
fn moment_ratios(x: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    let m = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - m;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let constant = x.iter().all(|v| *v == x[0]);
    if constant || m2 == 0.0 {
        return None;
    }
    Some((m3 / m2.powf(1.5), m4 / (m2 * m2)))
}

pub fn describe(x: &[f64]) -> Result<Summary> {
    if x.len() < 2 {
        return Err(Error::invalid("describe needs at least 2 observations"));
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let degenerate = max == min;
    let moments = moment_ratios(x);
    Ok(Summary {
        n: x.len(),
        mean: mean(x),
        max,
        min,
        std_dev: if degenerate { 0.0 } else { sample_variance(x).sqrt() },
        skewness: moments.map(|m| m.0),
        excess_kurtosis: moments.map(|m| m.1 - 3.0),
    })
}

/// `n/6 · (S² + (K − 3)²/4)`.
pub fn jarque_bera_statistic(n: usize, skewness: f64, kurtosis: f64) -> f64 {
    n as f64 / 6.0 * (skewness * skewness + (kurtosis - 3.0).powi(2) / 4.0)
}

pub fn jarque_bera(x: &[f64]) -> Result<TestResult> {
    if x.len() < 8 {
        return Err(Error::invalid("Jarque-Bera needs at least 8 observations"));
    }
    let (s, k) = moment_ratios(x).ok_or_else(|| Error::invalid("Jarque-Bera: constant input has undefined moments"))?;
    let jb = jarque_bera_statistic(x.len(), s, k);
    Ok(TestResult::from_p_value("jarque_bera", jb, chi2_sf(jb, 2.0), None))
}

/// Ljung-Box portmanteau statistic of order `m` on `x` itself.
pub fn ljung_box(x: &[f64], m: usize) -> Result<TestResult> {
    let n = x.len();
    if m == 0 || m >= n {
        return Err(Error::invalid(format!("Ljung-Box order {m} needs 1 <= m < n = {n}")));
    }
    let mu = mean(x);
    let d: Vec<f64> = x.iter().map(|v| v - mu).collect();
    let denom: f64 = d.iter().map(|v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::invalid("Ljung-Box: series has zero variance"));
    }
    let nf = n as f64;
    let mut q = 0.0;
    for k in 1..=m {
        let rho = d[k..].iter().zip(&d[..n - k]).map(|(a, b)| a * b).sum::<f64>() / denom;
        q += rho * rho / (nf - k as f64);
    }
    q *= nf * (nf + 2.0);
    Ok(TestResult::from_p_value("ljung_box", q, chi2_sf(q, m as f64), Some(m)))
}

/// Ljung-Box of order `m` on the squared (standardized) residuals.
pub fn ljung_box_squared(residuals: &[f64], m: usize) -> Result<TestResult> {
    let sq: Vec<f64> = residuals.iter().map(|e| e * e).collect();
    let mut r = ljung_box(&sq, m)?;
    r.test = "ljung_box_squared".into();
    Ok(r)
}

/// Engle's ARCH-LM test: regress ε²_t on a constant and m own lags; LM = n·R².
pub fn arch_lm(residuals: &[f64], m: usize) -> Result<TestResult> {
    let n = residuals.len();
    if m == 0 || n <= 2 * m {
        return Err(Error::invalid(format!("ARCH-LM order {m} needs n = {n} > 2m")));
    }
    let sq: Vec<f64> = residuals.iter().map(|e| e * e).collect();
    let rows = n - m;
    let x = DMatrix::from_fn(rows, m + 1, |i, j| if j == 0 { 1.0 } else { sq[m + i - j] });
    let y = DVector::from_fn(rows, |i, _| sq[m + i]);
    let fit = ols(&x, &y).map_err(|_| Error::Singular("ARCH-LM auxiliary regression is singular".into()))?;
    let ybar = y.mean();
    let sst: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::Singular("ARCH-LM: squared residuals are constant".into()));
    }
    let r2 = (1.0 - fit.ssr / sst).max(0.0);
    let lm = rows as f64 * r2;
    Ok(TestResult::from_p_value("arch_lm", lm, chi2_sf(lm, m as f64), Some(m)))
}

/// Augmented Dickey-Fuller with a constant and no trend. The augmentation lag is
/// chosen by minimum AIC over `0..=max_lag` on a common sample, then the chosen
/// regression is re-run on all usable observations.
pub fn adf(x: &[f64], max_lag: usize) -> Result<TestResult> {
    let n = x.len();
    if n <= max_lag + 10 {
        return Err(Error::invalid(format!("ADF needs more than max_lag + 10 = {} observations", max_lag + 10)));
    }
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    // dx[t-1] = x[t] - x[t-1]; regression rows are indexed by t in x.
    let design = |p: usize, first_t: usize| {
        let rows = n - first_t;
        let xm = DMatrix::from_fn(rows, p + 2, |i, j| {
            let t = first_t + i;
            match j {
                0 => 1.0,
                1 => x[t - 1],
                _ => dx[t - 1 - (j - 1)],
            }
        });
        let y = DVector::from_fn(rows, |i, _| dx[first_t + i - 1]);
        (xm, y)
    };
    let common_start = max_lag + 1;
    let mut best = (f64::INFINITY, 0usize);
    for p in 0..=max_lag {
        let (xm, y) = design(p, common_start);
        let fit = match ols(&xm, &y) {
            Ok(f) => f,
            Err(_) => continue,
        };
        let rows = y.len() as f64;
        let aic = rows * (fit.ssr / rows).ln() + 2.0 * (p + 2) as f64;
        if aic < best.0 {
            best = (aic, p);
        }
    }
    if !best.0.is_finite() {
        return Err(Error::Singular("ADF design is singular for every lag".into()));
    }
    let p = best.1;
    let (xm, y) = design(p, p + 1);
    let fit = ols(&xm, &y).map_err(|_| Error::Singular("ADF design is near-singular".into()))?;
    let tau = fit.t_stat(1);
    if !tau.is_finite() {
        return Err(Error::Singular("ADF t-statistic is not finite".into()));
    }
    let verdicts = ADF_CRITICAL
        .iter()
        .map(|&(a, c)| (level_key(a), if tau < c { Verdict::Reject } else { Verdict::FailToReject }))
        .collect();
    Ok(TestResult {
        test: "adf".into(),
        statistic: tau,
        p_value: None,
        lag_order: Some(p),
        verdicts,
    })
}

/// Hosking's multivariate portmanteau statistic on the rows of `series` (T×K):
/// `Q = T² Σ_k tr(Γ_k' Γ_0⁻¹ Γ_k Γ_0⁻¹)/(T − k)`, chi-square with K²m degrees of freedom.
pub fn multivariate_ljung_box(series: &DMatrix<f64>, m: usize) -> Result<TestResult> {
    let (t, k) = series.shape();
    if m == 0 || m >= t {
        return Err(Error::invalid(format!("portmanteau order {m} needs 1 <= m < T = {t}")));
    }
    let means = series.row_mean();
    let centered = DMatrix::from_fn(t, k, |i, j| series[(i, j)] - means[j]);
    let tf = t as f64;
    let autocov = |lag: usize| {
        let a = centered.rows(lag, t - lag);
        let b = centered.rows(0, t - lag);
        a.transpose() * b / tf
    };
    let g0_inv = autocov(0)
        .try_inverse()
        .ok_or_else(|| Error::Singular("lag-0 autocovariance is singular".into()))?;
    let mut q = 0.0;
    for lag in 1..=m {
        let g = autocov(lag);
        q += (g.transpose() * &g0_inv * &g * &g0_inv).trace() / (tf - lag as f64);
    }
    q *= tf * tf;
    let df = (k * k * m) as f64;
    Ok(TestResult::from_p_value("multivariate_ljung_box", q, chi2_sf(q, df), Some(m)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, StudentT};

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// ARCH(1)/GARCH(1,1) residual simulation, returning (ε, σ²).
    fn garch_path(n: usize, omega: f64, alpha: f64, beta: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let z = normals(n + 500, seed);
        let mut h = omega / (1.0 - alpha - beta);
        let mut e = Vec::new();
        let mut hs = Vec::new();
        let mut prev = 0.0;
        for zt in z {
            h = omega + alpha * prev * prev + beta * h;
            prev = h.sqrt() * zt;
            e.push(prev);
            hs.push(h);
        }
        (e[500..].to_vec(), hs[500..].to_vec())
    }

    #[test]
    fn describe_small_vector() {
        let s = describe(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert!((s.std_dev - 1.0).abs() < 1e-15);
        assert_eq!((s.min, s.max), (1.0, 3.0));
        assert!(s.skewness.unwrap().abs() < 1e-15);
    }

    #[test]
    fn describe_constant_marks_moments_undefined() {
        let s = describe(&[0.1; 10]).unwrap();
        assert_eq!(s.std_dev, 0.0);
        assert!(s.skewness.is_none() && s.excess_kurtosis.is_none());
        assert!(describe(&[1.0]).is_err());
    }

    #[test]
    fn describe_monte_carlo_normal() {
        let s = describe(&normals(100_000, 7)).unwrap();
        assert!(s.mean.abs() < 0.02);
        assert!((s.std_dev - 1.0).abs() < 0.02);
    }

    #[test]
    fn jarque_bera_closed_forms() {
        assert_eq!(jarque_bera_statistic(600, 0.0, 6.0), 225.0);
        assert_eq!(jarque_bera_statistic(100, 0.0, 3.0), 0.0);
        assert_eq!(chi2_sf(0.0, 2.0), 1.0);
    }

    #[test]
    fn jarque_bera_zero_for_mesokurtic_symmetric_sample() {
        // three-point law at ±1 with mass 1/6 each has S = 0 and K = 3
        let mut x = vec![0.0; 8];
        x.extend([-1.0, -1.0, 1.0, 1.0]);
        let r = jarque_bera(&x).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jarque_bera_symmetric_sample() {
        // symmetric sample: the skewness term vanishes
        let x = [-2.0, -1.0, -0.5, 0.0, 0.0, 0.5, 1.0, 2.0];
        let (s, k) = moment_ratios(&x).unwrap();
        assert!(s.abs() < 1e-15);
        let r = jarque_bera(&x).unwrap();
        assert!((r.statistic - jarque_bera_statistic(8, 0.0, k)).abs() < 1e-12);
    }

    #[test]
    fn jarque_bera_rejects_heavy_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t3 = StudentT::new(3.0).unwrap();
        let x: Vec<f64> = (0..5000).map(|_| t3.sample(&mut rng)).collect();
        let r = jarque_bera(&x).unwrap();
        assert!(r.p_value.unwrap() < 0.01);
        assert!(r.rejects_at(0.01));
    }

    #[test]
    fn jarque_bera_rejects_constant_and_short() {
        assert!(jarque_bera(&[2.0; 20]).is_err());
        assert!(jarque_bera(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn ljung_box_size_under_iid_noise() {
        let reps = 500;
        let mut rejections = 0;
        for seed in 0..reps {
            let r = ljung_box_squared(&normals(5000, 1000 + seed), 40).unwrap();
            if r.rejects_at(0.05) {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!((rate - 0.05).abs() <= 0.02, "rejection rate {rate}");
    }

    #[test]
    fn ljung_box_zero_autocorrelation_by_construction() {
        // squared series c + d where d has ±1 spikes further apart than m
        let m = 10;
        let n = 100;
        let mut sq = vec![4.0f64; n];
        sq[0] += 1.0;
        sq[m + 1] -= 1.0;
        let resid: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
        let r = ljung_box_squared(&resid, m).unwrap();
        assert!(r.statistic.abs() < 1e-20, "{}", r.statistic);
        assert_eq!(r.lag_order, Some(m));
    }

    #[test]
    fn ljung_box_detects_arch() {
        let (e, _) = garch_path(5000, 0.5, 0.5, 0.0, 3);
        let r = ljung_box_squared(&e, 40).unwrap();
        assert!(r.p_value.unwrap() < 0.01);
    }

    #[test]
    fn ljung_box_order_validation() {
        assert!(ljung_box_squared(&[1.0, 2.0, 3.0], 3).is_err());
        assert!(ljung_box_squared(&[1.0, 2.0, 3.0], 0).is_err());
    }

    #[test]
    fn arch_lm_size_under_iid_noise() {
        let reps = 200;
        let passes = (0..reps)
            .filter(|&s| arch_lm(&normals(2000, 5000 + s), 5).unwrap().p_value.unwrap() > 0.10)
            .count();
        // under the null P(p > 0.10) = 0.90 exactly; allow three binomial standard errors
        let floor = 0.9 * reps as f64 - 3.0 * (reps as f64 * 0.9 * 0.1).sqrt();
        assert!(passes as f64 >= floor, "passes {passes}/{reps}");
    }

    #[test]
    fn arch_lm_detects_garch_and_clears_after_standardizing() {
        let (e, h) = garch_path(5000, 0.1, 0.3, 0.6, 21);
        assert!(arch_lm(&e, 5).unwrap().p_value.unwrap() < 0.01);
        let z: Vec<f64> = e.iter().zip(&h).map(|(e, h)| e / h.sqrt()).collect();
        assert!(arch_lm(&z, 5).unwrap().p_value.unwrap() > 0.10);
    }

    #[test]
    fn arch_lm_rejects_short_or_constant() {
        assert!(arch_lm(&[1.0; 10], 5).is_err());
        assert!(matches!(arch_lm(&[1.0; 100], 5), Err(Error::Singular(_))));
    }

    fn random_walk(n: usize, seed: u64) -> Vec<f64> {
        normals(n, seed)
            .into_iter()
            .scan(0.0, |s, e| {
                *s += e;
                Some(*s)
            })
            .collect()
    }

    #[test]
    fn adf_size_on_random_walks() {
        let reps = 200;
        let fails = (0..reps)
            .filter(|&s| !adf(&random_walk(2000, 9000 + s), 8).unwrap().rejects_at(0.05))
            .count();
        assert!(fails as f64 >= 0.9 * reps as f64, "fail-to-reject {fails}/{reps}");
    }

    #[test]
    fn adf_power_on_noise() {
        let reps = 200;
        let rejects = (0..reps)
            .filter(|&s| adf(&normals(2000, 20_000 + s), 8).unwrap().rejects_at(0.01))
            .count();
        assert!(rejects as f64 >= 0.95 * reps as f64, "rejects {rejects}/{reps}");
    }

    #[test]
    fn adf_rejects_ar1() {
        let e = normals(2000, 77);
        let mut x = vec![0.0];
        for t in 1..2000 {
            x.push(0.5 * x[t - 1] + e[t]);
        }
        let r = adf(&x, 8).unwrap();
        assert!(r.rejects_at(0.05));
        assert!(r.p_value.is_none());
    }

    #[test]
    fn adf_rejects_constant_and_short() {
        assert!(adf(&[1.0; 50], 4).is_err());
        assert!(adf(&[1.0, 2.0], 4).is_err());
    }

    #[test]
    fn multivariate_portmanteau_on_noise_and_arch() {
        let a = normals(3000, 1);
        let b = normals(3000, 2);
        let m = DMatrix::from_fn(3000, 2, |i, j| if j == 0 { a[i] } else { b[i] });
        let r = multivariate_ljung_box(&m, 5).unwrap();
        assert!(r.p_value.unwrap() > 0.001);
        let (e, _) = garch_path(3000, 0.5, 0.5, 0.0, 5);
        let sq = DMatrix::from_fn(3000, 2, |i, j| if j == 0 { e[i] * e[i] } else { b[i] * b[i] });
        assert!(multivariate_ljung_box(&sq, 5).unwrap().p_value.unwrap() < 0.01);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn statistics_invariant_to_affine_rescaling(seed in 0u64..1000, scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
            let x = normals(400, seed);
            let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
            let a = jarque_bera(&x).unwrap().statistic;
            let b = jarque_bera(&y).unwrap().statistic;
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
            // squared standardized residuals: pure rescaling only
            let z: Vec<f64> = x.iter().map(|v| scale * v).collect();
            let a = ljung_box_squared(&x, 10).unwrap().statistic;
            let b = ljung_box_squared(&z, 10).unwrap().statistic;
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
            let w = random_walk(300, seed);
            let ws: Vec<f64> = w.iter().map(|v| scale * v + shift).collect();
            let a = adf(&w, 3).unwrap().statistic;
            let b = adf(&ws, 3).unwrap().statistic;
            prop_assert!((a - b).abs() <= 1e-7 * a.abs().max(1.0));
        }

        #[test]
        fn p_values_decrease_in_statistic(df in 1u32..60, a in 0.0f64..200.0, b in 0.0f64..200.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(chi2_sf(hi, df as f64) <= chi2_sf(lo, df as f64));
        }
    }
}
