//! Penalised linear regression on standardised features.
//!
//! The objective is `(1/2n)‖y − ȳ − Zβ‖² + λ(mix·‖β‖₁ + (1−mix)/2·‖β‖²)` with
//! `Z` the columns standardised by their mean and population standard
//! deviation. The intercept is never penalised.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    None,
    Ridge { lambda: f64 },
    Lasso { lambda: f64 },
    ElasticNet { lambda: f64, mix: f64 },
}

impl Penalty {
    /// `(λ, mix)`; ridge is `mix = 0`, lasso `mix = 1`.
    fn lambda_mix(self) -> (f64, f64) {
        match self {
            Penalty::None => (0.0, 0.0),
            Penalty::Ridge { lambda } => (lambda, 0.0),
            Penalty::Lasso { lambda } => (lambda, 1.0),
            Penalty::ElasticNet { lambda, mix } => (lambda, mix),
        }
    }

    fn validate(self) -> Result<()> {
        let (lambda, mix) = self.lambda_mix();
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!("penalty λ must be finite and ≥ 0, got {lambda}")));
        }
        if !(0.0..=1.0).contains(&mix) {
            return Err(Error::invalid(format!("mixing weight must lie in [0, 1], got {mix}")));
        }
        Ok(())
    }
}

/// Per-column location and scale; constant columns get scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let v = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let s = v.sqrt();
            mean.push(m);
            scale.push(if s > 1e-12 * m.abs().max(1.0) { s } else { 1.0 });
        }
        Standardization { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }

    pub fn apply_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Intercept on the original feature scale.
    pub intercept: f64,
    /// Coefficients on the original feature scale.
    pub coefficients: Vec<f64>,
    /// Coefficients on the standardised scale, as solved.
    pub standardized_coefficients: Vec<f64>,
    pub penalty: Penalty,
    pub standardization: Standardization,
    pub sweeps: usize,
}

pub const CD_TOL: f64 = 1e-9;
pub const CD_MAX_SWEEPS: usize = 100_000;

pub fn fit_linear(x: &DMatrix<f64>, y: &[f64], penalty: Penalty) -> Result<LinearModel> {
    penalty.validate()?;
    let (n, p) = x.shape();
    if y.len() != n {
        return Err(Error::Dimension { expected: n, got: y.len() });
    }
    if n <= 2 {
        return Err(Error::invalid("linear fit needs more than 2 rows"));
    }
    if p == 0 {
        return Err(Error::invalid("linear fit needs at least one feature"));
    }
    let std = Standardization::fit(x);
    let z = std.apply(x);
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let (lambda, mix) = penalty.lambda_mix();
    let (beta, sweeps) = if lambda == 0.0 || mix == 0.0 {
        (solve_ridge(&z, &yc, lambda)?, 0)
    } else {
        coordinate_descent(&z, &yc, lambda, mix)
    };
    let coefficients: Vec<f64> = beta.iter().zip(&std.scale).map(|(b, s)| b / s).collect();
    let intercept = y_mean - coefficients.iter().zip(&std.mean).map(|(c, m)| c * m).sum::<f64>();
    Ok(LinearModel {
        intercept,
        coefficients,
        standardized_coefficients: beta.iter().copied().collect(),
        penalty,
        standardization: std,
        sweeps,
    })
}

fn solve_ridge(z: &DMatrix<f64>, yc: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = z.nrows() as f64;
    let p = z.ncols();
    let gram = z.transpose() * z / n + DMatrix::identity(p, p) * lambda;
    let rhs = z.transpose() * yc / n;
    let advice = "add a ridge or lasso penalty";
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("normal equations are singular; {advice}")))?;
    let diag = chol.l().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    if lo <= 1e-7 * hi {
        return Err(Error::Singular(format!("normal equations are near-singular; {advice}")));
    }
    Ok(chol.solve(&rhs))
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    x.signum() * (x.abs() - t).max(0.0)
}

fn coordinate_descent(z: &DMatrix<f64>, yc: &DVector<f64>, lambda: f64, mix: f64) -> (DVector<f64>, usize) {
    let (n, p) = z.shape();
    let nf = n as f64;
    let d: Vec<f64> = z.column_iter().map(|c| c.norm_squared() / nf).collect();
    let mut beta = DVector::zeros(p);
    let mut resid = yc.clone();
    for sweep in 1..=CD_MAX_SWEEPS {
        let mut max_change = 0.0f64;
        for j in 0..p {
            let denom = d[j] + lambda * (1.0 - mix);
            if denom == 0.0 {
                continue;
            }
            let col = z.column(j);
            let rho = col.dot(&resid) / nf + d[j] * beta[j];
            let new = soft_threshold(rho, lambda * mix) / denom;
            let delta: f64 = new - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = new;
                max_change = max_change.max(delta.abs());
            }
        }
        if max_change < CD_TOL {
            return (beta, sweep);
        }
    }
    (beta, CD_MAX_SWEEPS)
}

impl LinearModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coefficients).map(|(x, c)| x * c).sum::<f64>()
    }
}
