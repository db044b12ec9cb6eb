//! Full BEKK(1,1) multivariate GARCH.
//!
//! `H_t = C'C + A'ε_{t−1}ε'_{t−1}A + B'H_{t−1}B` with `C` lower triangular.
//! Returns are demeaned by their sample means and the recursion starts at the
//! sample covariance. Estimation maximises the Gaussian quasi-likelihood with
//! BFGS on series rescaled to unit variance, using an analytic gradient of the
//! recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{multivariate_ljung_box, TestResult};
use crate::error::{Error, Result};
use crate::garch::FitOptions;
use crate::optim::{self, BfgsOptions, Objective};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BekkParams {
    /// Lower triangular intercept factor.
    pub c: DMatrix<f64>,
    /// Shock loading (ARCH) matrix.
    pub a: DMatrix<f64>,
    /// Persistence (GARCH) matrix; some tables label it `G`.
    pub b: DMatrix<f64>,
}

impl BekkParams {
    pub fn new(c: DMatrix<f64>, a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = c.nrows();
        if [c.shape(), a.shape(), b.shape()].iter().any(|s| *s != (n, n)) {
            return Err(Error::invalid("BEKK matrices must all be N×N"));
        }
        for i in 0..n {
            for j in i + 1..n {
                if c[(i, j)] != 0.0 {
                    return Err(Error::invalid("C must be lower triangular"));
                }
            }
        }
        Ok(BekkParams { c, a, b })
    }

    /// Diagonal BEKK with `A = a·I`, `B = b·I`.
    pub fn diagonal(c: DMatrix<f64>, a: f64, b: f64) -> Result<Self> {
        let n = c.nrows();
        Self::new(c, DMatrix::identity(n, n) * a, DMatrix::identity(n, n) * b)
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn intercept(&self) -> DMatrix<f64> {
        self.c.transpose() * &self.c
    }

    fn n_free(n: usize) -> usize {
        n * (n + 1) / 2 + 2 * n * n
    }

    /// Free parameters: lower triangle of C row by row, then A and B row-major.
    fn to_vec(&self) -> Vec<f64> {
        let n = self.dim();
        let mut v = Vec::with_capacity(Self::n_free(n));
        for i in 0..n {
            for j in 0..=i {
                v.push(self.c[(i, j)]);
            }
        }
        for m in [&self.a, &self.b] {
            for i in 0..n {
                for j in 0..n {
                    v.push(m[(i, j)]);
                }
            }
        }
        v
    }

    fn from_vec(n: usize, v: &[f64]) -> Self {
        let mut c = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                c[(i, j)] = v[k];
                k += 1;
            }
        }
        let a = DMatrix::from_row_slice(n, n, &v[k..k + n * n]);
        let b = DMatrix::from_row_slice(n, n, &v[k + n * n..k + 2 * n * n]);
        BekkParams { c, a, b }
    }

    /// Sign normalisation: nonnegative diagonal of C (row flips), and A, B each
    /// flipped so their first nonzero diagonal entry is nonnegative. The
    /// likelihood is invariant under all of these.
    pub fn canonical(&self) -> Self {
        let mut p = self.clone();
        for i in 0..p.dim() {
            if p.c[(i, i)] < 0.0 {
                let mut row = p.c.row_mut(i);
                row.neg_mut();
            }
        }
        for m in [&mut p.a, &mut p.b] {
            if let Some(d) = (0..m.nrows()).map(|i| m[(i, i)]).find(|d| *d != 0.0) {
                if d < 0.0 {
                    m.neg_mut();
                }
            }
        }
        p
    }
}

/// Largest eigenvalue modulus of `A⊗A + B⊗B`.
pub fn spectral_radius(params: &BekkParams) -> f64 {
    let m = params.a.kronecker(&params.a) + params.b.kronecker(&params.b);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Per-series sample means and the demeaned residual matrix.
pub fn demean(returns: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let means: Vec<f64> = returns.column_iter().map(|c| c.mean()).collect();
    let resid = DMatrix::from_fn(returns.nrows(), returns.ncols(), |i, j| returns[(i, j)] - means[j]);
    (means, resid)
}

/// Sample covariance with the `T` denominator of already demeaned residuals.
fn sample_covariance(resid: &DMatrix<f64>) -> DMatrix<f64> {
    resid.transpose() * resid / resid.nrows() as f64
}

fn check_shape(params: &BekkParams, resid: &DMatrix<f64>) -> Result<()> {
    if resid.ncols() != params.dim() {
        return Err(Error::Dimension {
            expected: params.dim(),
            got: resid.ncols(),
        });
    }
    if resid.nrows() < 2 {
        return Err(Error::invalid("BEKK needs at least 2 observations"));
    }
    Ok(())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Conditional covariance path for demeaned residuals (T×N).
pub fn filter_covariance(params: &BekkParams, residuals: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    check_shape(params, residuals)?;
    let cc = params.intercept();
    let mut h = sample_covariance(residuals);
    let mut path = Vec::with_capacity(residuals.nrows());
    for t in 0..residuals.nrows() {
        if t > 0 {
            let e = residuals.row(t - 1).transpose();
            let ae = params.a.transpose() * e;
            h = &cc + &ae * ae.transpose() + params.b.transpose() * &h * &params.b;
            symmetrize(&mut h);
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t,
                stage: "covariance recursion",
            });
        }
        path.push(h.clone());
    }
    Ok(path)
}

/// `−½ Σ_t [N ln 2π + ln det H_t + ε'_t H_t⁻¹ ε_t]` over demeaned residuals.
pub fn log_likelihood(params: &BekkParams, residuals: &DMatrix<f64>) -> Result<f64> {
    check_shape(params, residuals)?;
    let n = params.dim();
    let v = params.to_vec();
    eval(n, &v, residuals, false).map(|(ll, _)| ll)
}

/// Log-likelihood and optional analytic gradient over the free-parameter vector.
fn eval(n: usize, v: &[f64], resid: &DMatrix<f64>, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    let p = BekkParams::from_vec(n, v);
    let k = v.len();
    let cc = p.intercept();
    let at = p.a.transpose();
    let bt = p.b.transpose();

    // Constant derivative pieces: d(C'C), and unit perturbations of A and B.
    let n_c = n * (n + 1) / 2;
    let mut d_cc = Vec::new();
    let mut unit: Vec<(usize, usize)> = Vec::new();
    if want_grad {
        for i in 0..n {
            for j in 0..=i {
                // C'C = Σ_r c_r c_r' over rows; ∂/∂C_ij = e_j c_i' + c_i e_j'
                let ci = p.c.row(i).transpose();
                let mut d = DMatrix::zeros(n, n);
                for m in 0..n {
                    d[(j, m)] += ci[m];
                    d[(m, j)] += ci[m];
                }
                d_cc.push(d);
            }
        }
        for i in 0..n {
            for j in 0..n {
                unit.push((i, j));
            }
        }
    }

    let mut h = sample_covariance(resid);
    let mut dh: Vec<DMatrix<f64>> = if want_grad { vec![DMatrix::zeros(n, n); k] } else { Vec::new() };
    let mut grad = vec![0.0; if want_grad { k } else { 0 }];
    let mut ll = 0.0;
    for t in 0..resid.nrows() {
        if t > 0 {
            let e = resid.row(t - 1).transpose();
            let ae = &at * &e; // A'ε
            let h_prev = h;
            let bh = &bt * &h_prev; // B'H
            h = &cc + &ae * ae.transpose() + &bh * &p.b;
            symmetrize(&mut h);
            if want_grad {
                for (j, dhj) in dh.iter_mut().enumerate() {
                    let mut next = &bt * &*dhj * &p.b;
                    if j < n_c {
                        next += &d_cc[j];
                    } else {
                        let (r, c) = unit[(j - n_c) % (n * n)];
                        if j < n_c + n * n {
                            // ∂(A'SA)/∂A_rc = E_cr S A + A' S E_rc, with A'S E_rc = (A'ε) ε_r e_c'
                            for m in 0..n {
                                next[(c, m)] += e[r] * ae[m];
                                next[(m, c)] += ae[m] * e[r];
                            }
                        } else {
                            // ∂(B'HB)/∂B_rc = E_cr H B + B' H E_rc
                            let hb_row = h_prev.row(r) * &p.b; // row r of H·B
                            let bh_col = bh.column(r); // column r of B'H
                            for m in 0..n {
                                next[(c, m)] += hb_row[m];
                                next[(m, c)] += bh_col[m];
                            }
                        }
                    }
                    *dhj = next;
                }
            }
        }
        let chol = Cholesky::<f64, Dyn>::new(h.clone()).ok_or(Error::NonFinite {
            t,
            stage: "covariance Cholesky",
        })?;
        let e = resid.row(t).transpose();
        let u = chol.solve(&e);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ll -= 0.5 * (n as f64 * LN_2PI + logdet + e.dot(&u));
        if want_grad {
            let hinv = chol.inverse();
            for (j, dhj) in dh.iter().enumerate() {
                // d(−½[ln det H + ε'H⁻¹ε]) = −½[tr(H⁻¹ dH) − u' dH u]
                let tr = hinv.component_mul(dhj).sum();
                let quad = u.dot(&(dhj * &u));
                grad[j] -= 0.5 * (tr - quad);
            }
        }
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite {
            t: resid.nrows() - 1,
            stage: "log-likelihood",
        });
    }
    Ok((ll, grad))
}

struct BekkObjective<'a> {
    n: usize,
    resid: &'a DMatrix<f64>,
}

impl Objective for BekkObjective<'_> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match eval(self.n, x, self.resid, true) {
            Ok((ll, g)) if g.iter().all(|v| v.is_finite()) => {
                for (o, gi) in grad.iter_mut().zip(&g) {
                    *o = -gi;
                }
                -ll
            }
            _ => f64::INFINITY,
        }
    }

    fn value(&self, x: &[f64]) -> f64 {
        eval(self.n, x, self.resid, false).map_or(f64::INFINITY, |(ll, _)| -ll)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BekkStdErrors {
    pub c: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BekkFit {
    pub params: BekkParams,
    pub std_errors: Option<BekkStdErrors>,
    pub means: Vec<f64>,
    pub log_likelihood: f64,
    pub covariance_path: Vec<DMatrix<f64>>,
    pub spectral_radius: f64,
    pub stationary: bool,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Portmanteau statistic on vech(z_t z_t') of the standardized residuals.
    pub q2: Option<TestResult>,
}

/// Lower-triangular `C` with `C'C = s`.
fn lower_factor(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    // reverse the index order, take a Cholesky factor, and reverse back
    let n = s.nrows();
    let rev = DMatrix::from_fn(n, n, |i, j| s[(n - 1 - i, n - 1 - j)]);
    let l = Cholesky::new(rev)?.l();
    let lt = l.transpose();
    Some(DMatrix::from_fn(n, n, |i, j| lt[(n - 1 - i, n - 1 - j)]))
}

/// Starting point: `A = 0.3·I`, `B = 0.9·I`, `C'C = (1 − 0.3² − 0.9²)·S`.
fn start_params(cov: &DMatrix<f64>) -> Result<BekkParams> {
    let (a, b) = (0.3, 0.9);
    let c = lower_factor(&(cov * (1.0 - a * a - b * b)))
        .ok_or_else(|| Error::Singular("sample covariance is not positive definite".into()))?;
    BekkParams::diagonal(c, a, b)
}

/// Order of the multivariate portmanteau diagnostic.
pub const Q2_ORDER: usize = 40;

/// Quasi-maximum-likelihood BEKK(1,1) fit on raw returns (T×N).
pub fn fit(returns: &DMatrix<f64>, options: FitOptions) -> Result<BekkFit> {
    let (t, n) = returns.shape();
    if n < 1 {
        return Err(Error::invalid("BEKK needs at least one series"));
    }
    if t <= n || t < 3 {
        return Err(Error::invalid(format!("BEKK needs T > N, got T = {t}, N = {n}")));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("returns contain non-finite values"));
    }
    let (means, resid) = demean(returns);
    let scale: Vec<f64> = resid
        .column_iter()
        .map(|c| (c.norm_squared() / t as f64).sqrt())
        .collect();
    if scale.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::invalid("a series has zero variance"));
    }
    let scaled = DMatrix::from_fn(t, n, |i, j| resid[(i, j)] / scale[j]);
    let start = start_params(&sample_covariance(&scaled))?;
    let objective = BekkObjective { n, resid: &scaled };
    let x0 = start.to_vec();
    if !objective.value(&x0).is_finite() {
        return Err(Error::invalid("BEKK log-likelihood is not finite at the starting point"));
    }
    let bfgs = BfgsOptions {
        max_iter: options.max_iter,
        gtol: options.gtol,
        converged_tol: 1e-5,
    };
    let m = optim::minimize(&objective, &x0, bfgs);
    let scaled_params = BekkParams::from_vec(n, &m.x).canonical();

    // back to original units: C = C̃ D, A = D⁻¹ Ã D, B = D⁻¹ B̃ D
    let factor_c = |_: usize, j: usize| scale[j];
    let factor_ab = |i: usize, j: usize| scale[j] / scale[i];
    let rescale = |m: &DMatrix<f64>, f: &dyn Fn(usize, usize) -> f64| DMatrix::from_fn(n, n, |i, j| m[(i, j)] * f(i, j));
    let params = BekkParams {
        c: rescale(&scaled_params.c, &factor_c),
        a: rescale(&scaled_params.a, &factor_ab),
        b: rescale(&scaled_params.b, &factor_ab),
    };

    let canon = scaled_params.to_vec();
    let hess = optim::hessian_from_gradient(
        |x| {
            let mut g = vec![0.0; x.len()];
            objective.eval(x, &mut g);
            g
        },
        &canon,
        1e-5,
    );
    let std_errors = optim::std_errors_from_hessian(&hess).map(|se| {
        let p = BekkParams::from_vec(n, &se);
        BekkStdErrors {
            c: rescale(&p.c, &factor_c),
            a: rescale(&p.a, &factor_ab),
            b: rescale(&p.b, &factor_ab),
        }
    });

    let covariance_path = filter_covariance(&params, &resid)?;
    let log_likelihood = log_likelihood(&params, &resid)?;
    let q2 = standardized_outer_products(&resid, &covariance_path)
        .ok()
        .and_then(|v| multivariate_ljung_box(&v, Q2_ORDER.min(t / 5).max(1)).ok());
    let rho = spectral_radius(&params);
    Ok(BekkFit {
        params,
        std_errors,
        means,
        log_likelihood,
        covariance_path,
        spectral_radius: rho,
        stationary: rho < 1.0,
        converged: m.converged,
        iterations: m.iterations,
        grad_norm: m.grad_norm,
        q2,
    })
}

/// Rows `vech(z_t z_t')` with `z_t = L_t⁻¹ ε_t`, `H_t = L_t L_t'`.
pub fn standardized_outer_products(resid: &DMatrix<f64>, path: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let (t, n) = resid.shape();
    let k = n * (n + 1) / 2;
    let mut out = DMatrix::zeros(t, k);
    for (s, h) in path.iter().enumerate() {
        let chol = Cholesky::new(h.clone()).ok_or(Error::NonFinite {
            t: s,
            stage: "covariance Cholesky",
        })?;
        let z = chol
            .l()
            .solve_lower_triangular(&resid.row(s).transpose())
            .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
        let mut col = 0;
        for i in 0..n {
            for j in 0..=i {
                out[(s, col)] = z[i] * z[j];
                col += 1;
            }
        }
    }
    Ok(out)
}

/// `H_{T+1}` from the last filtered covariance and the latest demeaned residual.
pub fn forecast_covariance(fit: &BekkFit, latest_residuals: &[f64]) -> Result<DMatrix<f64>> {
    let n = fit.params.dim();
    if latest_residuals.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: latest_residuals.len(),
        });
    }
    let h = fit
        .covariance_path
        .last()
        .ok_or_else(|| Error::invalid("fit has an empty covariance path"))?;
    Ok(next_covariance(&fit.params, h, latest_residuals))
}

pub fn next_covariance(params: &BekkParams, h: &DMatrix<f64>, residual: &[f64]) -> DMatrix<f64> {
    let e = DVector::from_column_slice(residual);
    let ae = params.a.transpose() * e;
    let mut next = params.intercept() + &ae * ae.transpose() + params.b.transpose() * h * &params.b;
    symmetrize(&mut next);
    next
}

/// Per-series variance forecasts: the diagonal of `H_{T+1}`.
pub fn forecast_one_step(fit: &BekkFit, latest_residuals: &[f64]) -> Result<Vec<f64>> {
    let h = forecast_covariance(fit, latest_residuals)?;
    Ok(h.diagonal().iter().copied().collect())
}

/// Simulate `t` observations (T×N, zero mean) after `burn` discarded steps.
pub fn simulate(params: &BekkParams, t: usize, burn: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = params.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = params.intercept();
    // start near the unconditional level by iterating the mean recursion
    for _ in 0..200 {
        let mut next = params.intercept() + params.a.transpose() * &h * &params.a + params.b.transpose() * &h * &params.b;
        symmetrize(&mut next);
        h = next;
    }
    let mut out = DMatrix::zeros(t, n);
    let mut e = DVector::zeros(n);
    for s in 0..t + burn {
        if s > 0 {
            h = next_covariance(params, &h, e.as_slice());
        }
        let l = Cholesky::new(h.clone())
            .ok_or_else(|| Error::Singular("simulated covariance lost positive definiteness".into()))?
            .l();
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        e = l * z;
        if s >= burn {
            out.row_mut(s - burn).copy_from(&e.transpose());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garch::{self, GarchKind, GarchParams, GarchSpec};
    use proptest::prelude::*;

    fn mat(n: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, n, v)
    }

    #[test]
    fn no_dynamics_gives_constant_intercept() {
        let c = mat(2, &[0.5, 0.0, 0.2, 0.4]);
        let p = BekkParams::diagonal(c, 0.0, 0.0).unwrap();
        let resid = simulate(&BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.3]), 0.3, 0.9).unwrap(), 50, 10, 1).unwrap();
        let path = filter_covariance(&p, &resid).unwrap();
        for h in &path[1..] {
            assert!((h - p.intercept()).abs().max() < 1e-15);
        }
    }

    #[test]
    fn scalar_bekk_is_garch11() {
        let (c, a, b) = (0.3f64, 0.35f64, 0.9f64);
        let p = BekkParams::new(mat(1, &[c]), mat(1, &[a]), mat(1, &[b])).unwrap();
        let (r, _) = garch::simulate(GarchKind::Garch, &GarchParams::garch(c * c, a * a, b * b), 500, 100, 2);
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let resid = DMatrix::from_fn(r.len(), 1, |i, _| r[i] - mean);
        let path = filter_covariance(&p, &resid).unwrap();
        let spec = GarchSpec::new(GarchKind::Garch).with_mean(garch::MeanModel::Fixed(mean));
        let gp = GarchParams::garch(c * c, a * a, b * b).with_mu(mean);
        let f = garch::filter_variance(&spec, &gp, &r, None).unwrap();
        for (h, g) in path.iter().zip(&f.variance) {
            assert!((h[(0, 0)] - g).abs() <= 1e-12 * g);
        }
        let l1 = log_likelihood(&p, &resid).unwrap();
        let l2 = garch::log_likelihood(&spec, &gp, &r, None).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * l1.abs());
    }

    #[test]
    fn spectral_radius_examples() {
        let c = DMatrix::identity(2, 2);
        let p = BekkParams::diagonal(c.clone(), 0.3, 0.9).unwrap();
        assert!((spectral_radius(&p) - 0.90).abs() < 1e-12);
        let p = BekkParams::diagonal(c.clone(), 0.0, 0.0).unwrap();
        assert_eq!(spectral_radius(&p), 0.0);
        let p = BekkParams::diagonal(c, 0.8, 0.8).unwrap();
        assert!((spectral_radius(&p) - 1.28).abs() < 1e-12);
    }

    #[test]
    fn forecast_without_dynamics_is_intercept_diagonal() {
        let c = mat(2, &[0.5, 0.0, 0.2, 0.4]);
        let p = BekkParams::diagonal(c, 0.0, 0.0).unwrap();
        let h = next_covariance(&p, &DMatrix::identity(2, 2), &[3.0, -1.0]);
        let cc = p.intercept();
        assert!((h[(0, 0)] - cc[(0, 0)]).abs() < 1e-15 && (h[(1, 1)] - cc[(1, 1)]).abs() < 1e-15);
    }

    #[test]
    fn shock_spillover_through_off_diagonal_loading() {
        let c = mat(2, &[0.3, 0.0, 0.0, 0.3]);
        let h = DMatrix::identity(2, 2) * 0.5;
        let shock = [5.0, 0.0];
        // (A'e1e1'A)_22 = A_12²: zero with diagonal A, positive once A_12 ≠ 0
        let diag = BekkParams::new(c.clone(), mat(2, &[0.3, 0.0, 0.0, 0.3]), DMatrix::identity(2, 2) * 0.9).unwrap();
        let cross = BekkParams::new(c, mat(2, &[0.3, 0.2, 0.0, 0.3]), DMatrix::identity(2, 2) * 0.9).unwrap();
        let calm = next_covariance(&diag, &h, &[0.0, 0.0])[(1, 1)];
        assert_eq!(next_covariance(&diag, &h, &shock)[(1, 1)], calm);
        let spill = next_covariance(&cross, &h, &shock)[(1, 1)] - next_covariance(&cross, &h, &[0.0, 0.0])[(1, 1)];
        assert!((spill - 25.0 * 0.04).abs() < 1e-12);
    }

    #[test]
    fn likelihood_invariant_under_sign_normalisation() {
        let p = BekkParams::new(
            mat(2, &[-0.3, 0.0, 0.1, 0.25]),
            mat(2, &[-0.3, 0.05, 0.02, -0.25]),
            mat(2, &[-0.9, 0.01, 0.0, -0.88]),
        )
        .unwrap();
        let resid = simulate(&BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.3]), 0.3, 0.9).unwrap(), 300, 50, 4).unwrap();
        let canon = p.canonical();
        assert!(canon.c[(0, 0)] >= 0.0 && canon.a[(0, 0)] >= 0.0 && canon.b[(0, 0)] >= 0.0);
        let l1 = log_likelihood(&p, &resid).unwrap();
        let l2 = log_likelihood(&canon, &resid).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * l1.abs());
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let p = BekkParams::new(
            mat(3, &[0.3, 0.0, 0.0, 0.1, 0.25, 0.0, -0.05, 0.1, 0.2]),
            mat(3, &[0.3, 0.05, -0.02, 0.02, 0.25, 0.03, 0.01, -0.04, 0.2]),
            mat(3, &[0.9, 0.01, 0.02, -0.03, 0.88, 0.0, 0.02, 0.01, 0.93]),
        )
        .unwrap();
        let resid = simulate(&p, 200, 50, 5).unwrap();
        let v = p.to_vec();
        let (_, g) = eval(3, &v, &resid, true).unwrap();
        let num = optim::central_gradient(&|x: &[f64]| eval(3, x, &resid, false).unwrap().0, &v, 1e-6);
        let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in g.iter().zip(&num) {
            assert!((a - b).abs() <= 1e-5 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn lower_factor_reproduces_covariance() {
        let s = mat(3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let c = lower_factor(&s).unwrap();
        assert!((c.transpose() * &c - s).abs().max() < 1e-12);
        assert_eq!(c[(0, 1)], 0.0);
        assert_eq!(c[(1, 2)], 0.0);
    }

    #[test]
    fn stationary_model_has_bounded_running_variance() {
        let p = BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.3]), 0.3, 0.9).unwrap();
        assert!(spectral_radius(&p) < 1.0);
        let resid = simulate(&p, 20_000, 500, 11).unwrap();
        let path = filter_covariance(&p, &resid).unwrap();
        let half = path.len() / 2;
        let avg = |hs: &[DMatrix<f64>]| hs.iter().map(|h| h[(0, 0)]).sum::<f64>() / hs.len() as f64;
        let ratio = avg(&path[half..]) / avg(&path[..half]);
        assert!(ratio < 2.0 && ratio > 0.5, "{ratio}");
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(BekkParams::new(mat(2, &[1.0, 0.5, 0.0, 1.0]), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).is_err());
        let p = BekkParams::diagonal(DMatrix::identity(2, 2), 0.1, 0.5).unwrap();
        assert!(filter_covariance(&p, &DMatrix::zeros(10, 3)).is_err());
        assert!(fit(&DMatrix::zeros(2, 2), FitOptions::default()).is_err());
    }

    #[test]
    fn recovers_diagonal_bekk() {
        let truth = BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.25]), 0.3, 0.9).unwrap();
        let r = simulate(&truth, 10_000, 500, 21).unwrap();
        let f = fit(&r, FitOptions::default()).unwrap();
        for i in 0..2 {
            assert!((f.params.a[(i, i)] - 0.3).abs() < 0.05, "{}", f.params.a);
            assert!((f.params.b[(i, i)] - 0.9).abs() < 0.05, "{}", f.params.b);
        }
        assert!(f.stationary && f.spectral_radius < 1.0);
        assert!(f.converged, "grad norm {}", f.grad_norm);
        assert!(f.std_errors.is_some());
        assert!(f.q2.is_some());
        for h in &f.covariance_path {
            assert!(h.symmetric_eigenvalues().min() > 0.0);
        }
        let ll = log_likelihood(&f.params, &demean(&r).1).unwrap();
        assert!((ll - f.log_likelihood).abs() < 1e-9 * ll.abs());
        assert!(f.log_likelihood >= log_likelihood(&truth, &demean(&r).1).unwrap() - 1e-6);
    }

    #[test]
    fn fit_is_invariant_to_series_scale() {
        let truth = BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.25]), 0.25, 0.92).unwrap();
        let r = simulate(&truth, 2000, 200, 8).unwrap();
        let mut scaled = r.clone();
        scaled.column_mut(1).scale_mut(40.0);
        let f1 = fit(&r, FitOptions::default()).unwrap();
        let f2 = fit(&scaled, FitOptions::default()).unwrap();
        assert!((f1.log_likelihood - (f2.log_likelihood + 2000.0 * 40f64.ln())).abs() < 1e-5);
        assert!((f1.params.b[(1, 1)] - f2.params.b[(1, 1)]).abs() < 1e-4);
        assert!((f1.params.a[(0, 1)] * 40.0 - f2.params.a[(0, 1)]).abs() < 1e-3);
    }

    #[test]
    fn univariate_fit_matches_garch() {
        let (r, _) = garch::simulate(GarchKind::Garch, &GarchParams::garch(0.05, 0.08, 0.9), 3000, 200, 13);
        let m = DMatrix::from_column_slice(r.len(), 1, &r);
        let b = fit(&m, FitOptions::default()).unwrap();
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        let spec = GarchSpec::new(GarchKind::Garch).with_mean(garch::MeanModel::Fixed(mean));
        let g = garch::fit(&spec, &r, None, FitOptions::default()).unwrap();
        assert!((b.log_likelihood - g.log_likelihood).abs() <= 1e-4, "{} vs {}", b.log_likelihood, g.log_likelihood);
        let (c, a, bb) = (b.params.c[(0, 0)], b.params.a[(0, 0)], b.params.b[(0, 0)]);
        assert!((c * c - g.params.omega).abs() <= 1e-3);
        assert!((a * a - g.params.alpha).abs() <= 1e-3);
        assert!((bb * bb - g.params.beta).abs() <= 1e-3);
        let e = r[r.len() - 1] - mean;
        let fb = forecast_one_step(&b, &[e]).unwrap()[0];
        let fg = garch::forecast_one_step(&g, r[r.len() - 1], &[]).unwrap();
        assert!((fb - fg).abs() < 1e-3 * fg);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn filtered_covariances_are_positive_definite(
            c in prop::collection::vec(-0.5f64..0.5, 3),
            a in prop::collection::vec(-0.4f64..0.4, 4),
            b in prop::collection::vec(-0.6f64..0.6, 4),
            seed in 0u64..1000,
        ) {
            let cm = mat(2, &[0.2 + c[0].abs(), 0.0, c[1], 0.2 + c[2].abs()]);
            let p = BekkParams::new(cm, mat(2, &a), mat(2, &b)).unwrap();
            let truth = BekkParams::diagonal(mat(2, &[0.3, 0.0, 0.1, 0.3]), 0.3, 0.9).unwrap();
            let resid = simulate(&truth, 1000, 50, seed).unwrap();
            for h in filter_covariance(&p, &resid).unwrap() {
                let min_eig = h.symmetric_eigenvalues().min();
                prop_assert!(min_eig > 0.0);
            }
        }
    }
}
