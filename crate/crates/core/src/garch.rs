//! Univariate GARCH(1,1), EGARCH(1,1) and GJR-GARCH(1,1) with optional
//! exogenous variance regressors.
//!
//! Returns follow `r_t = μ + ε_t`, `ε_t = σ_t z_t`. The variance recursions are
//!
//! ```text
//! GARCH   σ²_t = ω + α ε²_{t−1} + β σ²_{t−1} + Σ γ_i X_{i,t−1}
//! GJR     σ²_t = ω + (α + γ 1{ε_{t−1} < 0}) ε²_{t−1} + β σ²_{t−1} + Σ γ_i X_{i,t−1}
//! EGARCH  ln σ²_t = ω + α(|z_{t−1}| − √(2/π)) + γ z_{t−1} + β ln σ²_{t−1} + Σ γ_i X_{i,t−1}
//! ```
//!
//! Exogenous regressors enter with a one-day lag so that σ²_t is known at
//! `t − 1`. The recursion starts at σ²_1 = sample variance of the returns.
//!
//! Estimation maximises the Gaussian quasi-likelihood with BFGS over an
//! unconstrained reparameterisation (log for ω, a softmax onto the stationarity
//! simplex for the ARCH/GARCH weights, `tanh` for the EGARCH β). The problem is
//! solved on returns and regressors rescaled to unit variance and the estimates
//! are mapped back afterwards.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{self, BfgsOptions, Objective};
use crate::stats::{mean, population_variance};

/// Floor applied to additive-regressor variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// E|z| for a standard normal.
const ABS_NORMAL_MEAN: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GarchKind {
    Garch,
    Egarch,
    Gjr,
}

impl GarchKind {
    fn has_gamma(self) -> bool {
        !matches!(self, GarchKind::Garch)
    }
}

impl std::str::FromStr for GarchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "garch" => Ok(GarchKind::Garch),
            "egarch" => Ok(GarchKind::Egarch),
            "gjr" => Ok(GarchKind::Gjr),
            other => Err(Error::invalid(format!("unknown GARCH model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanModel {
    /// μ estimated jointly with the variance parameters.
    Constant,
    /// μ held at the given value.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchSpec {
    pub kind: GarchKind,
    #[serde(default)]
    pub exogenous: Vec<String>,
    pub mean: MeanModel,
}

impl GarchSpec {
    pub fn new(kind: GarchKind) -> Self {
        GarchSpec {
            kind,
            exogenous: Vec::new(),
            mean: MeanModel::Constant,
        }
    }

    pub fn with_exogenous(mut self, names: Vec<String>) -> Self {
        self.exogenous = names;
        self
    }

    pub fn with_mean(mut self, mean: MeanModel) -> Self {
        self.mean = mean;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (i, a) in self.exogenous.iter().enumerate() {
            if self.exogenous[..i].contains(a) {
                return Err(Error::invalid(format!("duplicate exogenous regressor '{a}'")));
            }
        }
        Ok(())
    }

    fn estimates_mean(&self) -> bool {
        matches!(self.mean, MeanModel::Constant)
    }

    /// Names of the free parameters in estimation order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.estimates_mean() {
            names.push("mu".to_string());
        }
        names.extend(["omega", "alpha", "beta"].map(String::from));
        if self.kind.has_gamma() {
            names.push("gamma".into());
        }
        names.extend(self.exogenous.iter().map(|x| format!("exo:{x}")));
        names
    }

    fn n_params(&self) -> usize {
        self.estimates_mean() as usize + 3 + self.kind.has_gamma() as usize + self.exogenous.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub mu: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Asymmetry term; zero for plain GARCH.
    pub gamma: f64,
    pub exo_coefs: Vec<f64>,
}

impl GarchParams {
    pub fn garch(omega: f64, alpha: f64, beta: f64) -> Self {
        GarchParams {
            mu: 0.0,
            omega,
            alpha,
            beta,
            gamma: 0.0,
            exo_coefs: Vec::new(),
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn validate(&self, kind: GarchKind) -> Result<()> {
        let all = [self.mu, self.omega, self.alpha, self.beta, self.gamma];
        if all.iter().chain(&self.exo_coefs).any(|v| !v.is_finite()) {
            return Err(Error::invalid("GARCH parameters must be finite"));
        }
        let bad = |m: &str| Err(Error::invalid(format!("inadmissible {kind:?} parameters: {m}")));
        match kind {
            GarchKind::Garch => {
                if self.gamma != 0.0 {
                    return bad("gamma must be zero");
                }
                if self.omega <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 {
                    return bad("need omega > 0, alpha >= 0, beta >= 0");
                }
                if self.alpha + self.beta >= 1.0 {
                    return bad("alpha + beta must be < 1");
                }
            }
            GarchKind::Gjr => {
                if self.omega <= 0.0 || self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.gamma < 0.0 {
                    return bad("need omega > 0, alpha >= 0, beta >= 0, alpha + gamma >= 0");
                }
                if self.alpha + self.beta + 0.5 * self.gamma >= 1.0 {
                    return bad("alpha + beta + gamma/2 must be < 1");
                }
            }
            GarchKind::Egarch => {
                if self.beta.abs() >= 1.0 {
                    return bad("|beta| must be < 1");
                }
            }
        }
        Ok(())
    }

    /// Natural parameters in [`GarchSpec::parameter_names`] order.
    fn to_vec(&self, spec: &GarchSpec) -> Vec<f64> {
        let mut v = Vec::with_capacity(spec.n_params());
        if spec.estimates_mean() {
            v.push(self.mu);
        }
        v.extend([self.omega, self.alpha, self.beta]);
        if spec.kind.has_gamma() {
            v.push(self.gamma);
        }
        v.extend(&self.exo_coefs);
        v
    }

    fn from_vec(spec: &GarchSpec, v: &[f64]) -> Self {
        let mut it = v.iter().copied();
        let mu = match spec.mean {
            MeanModel::Constant => it.next().unwrap(),
            MeanModel::Fixed(m) => m,
        };
        let omega = it.next().unwrap();
        let alpha = it.next().unwrap();
        let beta = it.next().unwrap();
        let gamma = if spec.kind.has_gamma() { it.next().unwrap() } else { 0.0 };
        GarchParams {
            mu,
            omega,
            alpha,
            beta,
            gamma,
            exo_coefs: it.collect(),
        }
    }
}

/// α+β for GARCH, α+β+γ/2 for GJR, |β| for EGARCH.
pub fn persistence_of(kind: GarchKind, p: &GarchParams) -> f64 {
    match kind {
        GarchKind::Garch => p.alpha + p.beta,
        GarchKind::Gjr => p.alpha + p.beta + 0.5 * p.gamma,
        GarchKind::Egarch => p.beta.abs(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFilter {
    pub variance: Vec<f64>,
    pub residuals: Vec<f64>,
    /// Number of steps where the additive-regressor variance hit [`VARIANCE_FLOOR`].
    pub floor_hits: usize,
}

fn check_exog(spec: &GarchSpec, n_params_exo: usize, returns: &[f64], exog: Option<&DMatrix<f64>>) -> Result<()> {
    let cols = exog.map_or(0, |x| x.ncols());
    if cols != spec.exogenous.len() || cols != n_params_exo {
        return Err(Error::Dimension {
            expected: spec.exogenous.len(),
            got: cols,
        });
    }
    if let Some(x) = exog {
        if x.nrows() != returns.len() {
            return Err(Error::Dimension {
                expected: returns.len(),
                got: x.nrows(),
            });
        }
    }
    Ok(())
}

struct Evaluation {
    loglik: f64,
    filter: VarianceFilter,
    /// d loglik / d natural parameters, when requested.
    grad: Option<Vec<f64>>,
}

/// Variance recursion, Gaussian log-likelihood and (optionally) its analytic
/// gradient by forward-mode differentiation of the recursion.
fn evaluate(
    spec: &GarchSpec,
    p: &GarchParams,
    returns: &[f64],
    exog: Option<&DMatrix<f64>>,
    want_grad: bool,
) -> Result<Evaluation> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::invalid("need at least 2 returns"));
    }
    let k = spec.n_params();
    let off = spec.estimates_mean() as usize;
    let (i_omega, i_alpha, i_beta) = (off, off + 1, off + 2);
    let i_gamma = off + 3;
    let i_exo = off + 3 + spec.kind.has_gamma() as usize;
    let n_exo = p.exo_coefs.len();

    let h0 = population_variance(returns);
    if !(h0 > 0.0) || !h0.is_finite() {
        return Err(Error::invalid("returns have zero or non-finite variance"));
    }
    let mut variance = Vec::with_capacity(n);
    let mut residuals = Vec::with_capacity(n);
    let mut floor_hits = 0;
    // derivative of h_t (GARCH/GJR) or ln h_t (EGARCH) with respect to the natural parameters
    let mut dstate = vec![0.0; if want_grad { k } else { 0 }];
    let mut grad = vec![0.0; if want_grad { k } else { 0 }];
    let mut loglik = 0.0;
    let mut h = h0;
    let mut eps_prev = 0.0;

    for t in 0..n {
        if t > 0 {
            let x_prev = |i: usize| exog.map_or(0.0, |x| x[(t - 1, i)]);
            let exo_term: f64 = (0..n_exo).map(|i| p.exo_coefs[i] * x_prev(i)).sum();
            match spec.kind {
                GarchKind::Garch | GarchKind::Gjr => {
                    let neg = (eps_prev < 0.0) as u8 as f64;
                    let coef = p.alpha + p.gamma * neg;
                    let e2 = eps_prev * eps_prev;
                    let h_prev = h;
                    let mut h_new = p.omega + coef * e2 + p.beta * h_prev + exo_term;
                    let floored = h_new < VARIANCE_FLOOR;
                    if floored {
                        h_new = VARIANCE_FLOOR;
                        floor_hits += 1;
                    }
                    if want_grad {
                        if floored {
                            dstate.iter_mut().for_each(|d| *d = 0.0);
                        } else {
                            for d in dstate.iter_mut() {
                                *d *= p.beta;
                            }
                            if off == 1 {
                                dstate[0] += -2.0 * coef * eps_prev;
                            }
                            dstate[i_omega] += 1.0;
                            dstate[i_alpha] += e2;
                            dstate[i_beta] += h_prev;
                            if spec.kind.has_gamma() {
                                dstate[i_gamma] += neg * e2;
                            }
                            for i in 0..n_exo {
                                dstate[i_exo + i] += x_prev(i);
                            }
                        }
                    }
                    h = h_new;
                }
                GarchKind::Egarch => {
                    let sd_prev = h.sqrt();
                    let z = eps_prev / sd_prev;
                    let ln_prev = h.ln();
                    let ln_new = p.omega + p.alpha * (z.abs() - ABS_NORMAL_MEAN) + p.gamma * z + p.beta * ln_prev + exo_term;
                    if want_grad {
                        // dz = dε/σ − z/2 · d ln h
                        let slope = p.alpha * z.signum() + p.gamma;
                        let mut next = vec![0.0; k];
                        for j in 0..k {
                            let deps = if off == 1 && j == 0 { -1.0 } else { 0.0 };
                            let dz = deps / sd_prev - 0.5 * z * dstate[j];
                            next[j] = slope * dz + p.beta * dstate[j];
                        }
                        next[i_omega] += 1.0;
                        next[i_alpha] += z.abs() - ABS_NORMAL_MEAN;
                        next[i_beta] += ln_prev;
                        next[i_gamma] += z;
                        for i in 0..n_exo {
                            next[i_exo + i] += x_prev(i);
                        }
                        dstate = next;
                    }
                    h = ln_new.exp();
                }
            }
            if !h.is_finite() || h <= 0.0 {
                return Err(Error::NonFinite {
                    t,
                    stage: "variance recursion",
                });
            }
        }
        let eps = returns[t] - p.mu;
        variance.push(h);
        residuals.push(eps);
        let ratio = eps * eps / h;
        loglik -= 0.5 * (LN_2PI + h.ln() + ratio);
        if want_grad {
            // d(−½[ln h + ε²/h]) = −½(1 − ε²/h)·(dh/h) − (ε/h)·dε
            let dlnh_scale = match spec.kind {
                GarchKind::Egarch => 1.0,
                _ => 1.0 / h,
            };
            let c = -0.5 * (1.0 - ratio) * dlnh_scale;
            for j in 0..k {
                grad[j] += c * dstate[j];
            }
            if off == 1 {
                grad[0] += eps / h;
            }
        }
        eps_prev = eps;
    }
    if !loglik.is_finite() {
        return Err(Error::NonFinite {
            t: n - 1,
            stage: "log-likelihood",
        });
    }
    Ok(Evaluation {
        loglik,
        filter: VarianceFilter {
            variance,
            residuals,
            floor_hits,
        },
        grad: want_grad.then_some(grad),
    })
}

/// Filter the conditional variance path. `exog` rows align with `returns`; row
/// `t − 1` drives σ²_t.
pub fn filter_variance(
    spec: &GarchSpec,
    params: &GarchParams,
    returns: &[f64],
    exog: Option<&DMatrix<f64>>,
) -> Result<VarianceFilter> {
    params.validate(spec.kind)?;
    check_exog(spec, params.exo_coefs.len(), returns, exog)?;
    Ok(evaluate(spec, params, returns, exog, false)?.filter)
}

/// Gaussian quasi log-likelihood `−½ Σ [ln 2π + ln σ²_t + ε²_t/σ²_t]`.
pub fn log_likelihood(spec: &GarchSpec, params: &GarchParams, returns: &[f64], exog: Option<&DMatrix<f64>>) -> Result<f64> {
    params.validate(spec.kind)?;
    check_exog(spec, params.exo_coefs.len(), returns, exog)?;
    Ok(evaluate(spec, params, returns, exog, false)?.loglik)
}

/// Unconstrained coordinates ↔ natural parameters.
pub mod reparam {
    use super::*;

    fn softmax(logits: &[f64]) -> Vec<f64> {
        // weights e^a_i / (1 + Σ e^a_j), the implicit slack has logit 0
        let m = logits.iter().copied().fold(0.0, f64::max);
        let exps: Vec<f64> = logits.iter().map(|a| (a - m).exp()).collect();
        let denom = (-m).exp() + exps.iter().sum::<f64>();
        exps.iter().map(|e| e / denom).collect()
    }

    /// Natural parameters from unconstrained coordinates, plus the Jacobian
    /// `∂natural/∂θ` (row-major `k × k`).
    pub fn to_natural(spec: &GarchSpec, theta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let k = theta.len();
        let off = spec.estimates_mean() as usize;
        let mut nat = theta.to_vec();
        let mut jac = DMatrix::identity(k, k);
        match spec.kind {
            GarchKind::Garch => {
                nat[off] = theta[off].exp();
                jac[(off, off)] = nat[off];
                let w = softmax(&theta[off + 1..off + 3]);
                nat[off + 1] = w[0];
                nat[off + 2] = w[1];
                for i in 0..2 {
                    for j in 0..2 {
                        jac[(off + 1 + i, off + 1 + j)] = w[i] * ((i == j) as u8 as f64 - w[j]);
                    }
                }
            }
            GarchKind::Gjr => {
                nat[off] = theta[off].exp();
                jac[(off, off)] = nat[off];
                // weights (α/2, β, (α+γ)/2) on the open simplex
                let w = softmax(&theta[off + 1..off + 4]);
                let dw = |i: usize, j: usize| w[i] * ((i == j) as u8 as f64 - w[j]);
                nat[off + 1] = 2.0 * w[0];
                nat[off + 2] = w[1];
                nat[off + 3] = 2.0 * w[2] - 2.0 * w[0];
                for j in 0..3 {
                    jac[(off + 1, off + 1 + j)] = 2.0 * dw(0, j);
                    jac[(off + 2, off + 1 + j)] = dw(1, j);
                    jac[(off + 3, off + 1 + j)] = 2.0 * dw(2, j) - 2.0 * dw(0, j);
                }
            }
            GarchKind::Egarch => {
                let b = theta[off + 2].tanh();
                nat[off + 2] = b;
                jac[(off + 2, off + 2)] = 1.0 - b * b;
            }
        }
        (nat, jac)
    }

    /// Inverse of [`to_natural`]; requires parameters strictly inside the admissible set.
    pub fn to_unconstrained(spec: &GarchSpec, nat: &[f64]) -> Result<Vec<f64>> {
        let off = spec.estimates_mean() as usize;
        let mut theta = nat.to_vec();
        let interior = |ws: &[f64]| -> Result<Vec<f64>> {
            let slack = 1.0 - ws.iter().sum::<f64>();
            if slack <= 0.0 || ws.iter().any(|w| *w <= 0.0) {
                return Err(Error::invalid("parameters on or outside the admissible boundary"));
            }
            Ok(ws.iter().map(|w| (w / slack).ln()).collect())
        };
        match spec.kind {
            GarchKind::Garch => {
                if nat[off] <= 0.0 {
                    return Err(Error::invalid("omega must be positive"));
                }
                theta[off] = nat[off].ln();
                let l = interior(&nat[off + 1..off + 3])?;
                theta[off + 1..off + 3].copy_from_slice(&l);
            }
            GarchKind::Gjr => {
                if nat[off] <= 0.0 {
                    return Err(Error::invalid("omega must be positive"));
                }
                theta[off] = nat[off].ln();
                let (a, b, g) = (nat[off + 1], nat[off + 2], nat[off + 3]);
                let l = interior(&[a / 2.0, b, (a + g) / 2.0])?;
                theta[off + 1..off + 4].copy_from_slice(&l);
            }
            GarchKind::Egarch => {
                if nat[off + 2].abs() >= 1.0 {
                    return Err(Error::invalid("|beta| must be < 1"));
                }
                theta[off + 2] = nat[off + 2].atanh();
            }
        }
        Ok(theta)
    }
}

/// Negative log-likelihood over the unconstrained coordinates; the objective the
/// optimiser sees.
pub struct GarchObjective<'a> {
    pub spec: &'a GarchSpec,
    pub returns: &'a [f64],
    pub exog: Option<&'a DMatrix<f64>>,
}

impl GarchObjective<'_> {
    pub fn natural_params(&self, theta: &[f64]) -> GarchParams {
        GarchParams::from_vec(self.spec, &reparam::to_natural(self.spec, theta).0)
    }
}

impl Objective for GarchObjective<'_> {
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (nat, jac) = reparam::to_natural(self.spec, theta);
        let p = GarchParams::from_vec(self.spec, &nat);
        match evaluate(self.spec, &p, self.returns, self.exog, true) {
            Ok(ev) => {
                let g = ev.grad.expect("gradient requested");
                if g.iter().any(|v| !v.is_finite()) {
                    return f64::INFINITY;
                }
                for (j, gj) in grad.iter_mut().enumerate() {
                    *gj = -(0..g.len()).map(|i| g[i] * jac[(i, j)]).sum::<f64>();
                }
                -ev.loglik
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let p = self.natural_params(theta);
        evaluate(self.spec, &p, self.returns, self.exog, false).map_or(f64::INFINITY, |e| -e.loglik)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    pub gtol: f64,
    /// Also try a small sweep of alternative starting points and keep the best.
    pub multi_start: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 500,
            gtol: 1e-8,
            multi_start: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub spec: GarchSpec,
    pub params: GarchParams,
    /// Aligned with [`GarchSpec::parameter_names`]; `None` when the Hessian is
    /// not positive definite.
    pub std_errors: Option<Vec<f64>>,
    pub log_likelihood: f64,
    pub variance_path: Vec<f64>,
    pub std_residuals: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    pub floor_hits: usize,
}

impl GarchFit {
    pub fn persistence(&self) -> f64 {
        persistence_of(self.spec.kind, &self.params)
    }
}

/// Scale factors that bring the returns and regressors to unit variance.
struct Scaling {
    returns: f64,
    exog: Vec<f64>,
}

impl Scaling {
    /// Map parameters estimated on scaled data back to the original units, with
    /// the Jacobian of that map over the natural-parameter vector.
    fn unscale(&self, spec: &GarchSpec, scaled: &GarchParams) -> (GarchParams, DMatrix<f64>) {
        let s = self.returns;
        let s2 = s * s;
        let k = spec.n_params();
        let mut jac = DMatrix::identity(k, k);
        let off = spec.estimates_mean() as usize;
        let i_exo = off + 3 + spec.kind.has_gamma() as usize;
        let mut p = scaled.clone();
        p.mu = scaled.mu * s;
        if off == 1 {
            jac[(0, 0)] = s;
        }
        match spec.kind {
            GarchKind::Garch | GarchKind::Gjr => {
                p.omega = scaled.omega * s2;
                jac[(off, off)] = s2;
                for (i, c) in p.exo_coefs.iter_mut().enumerate() {
                    *c = scaled.exo_coefs[i] * s2 / self.exog[i];
                    jac[(i_exo + i, i_exo + i)] = s2 / self.exog[i];
                }
            }
            GarchKind::Egarch => {
                let ln_s2 = s2.ln();
                p.omega = scaled.omega + (1.0 - scaled.beta) * ln_s2;
                jac[(off, off + 2)] = -ln_s2;
                for (i, c) in p.exo_coefs.iter_mut().enumerate() {
                    *c = scaled.exo_coefs[i] / self.exog[i];
                    jac[(i_exo + i, i_exo + i)] = 1.0 / self.exog[i];
                }
            }
        }
        (p, jac)
    }
}

fn start_params(spec: &GarchSpec, n_exo: usize, mu: f64, var: f64, beta: f64) -> GarchParams {
    let alpha = 0.05;
    let omega = match spec.kind {
        GarchKind::Egarch => var.ln() * (1.0 - beta),
        _ => var * (1.0 - alpha - beta),
    };
    GarchParams {
        mu,
        omega,
        alpha,
        beta,
        gamma: 0.0,
        exo_coefs: vec![0.0; n_exo],
    }
}

/// Quasi-maximum-likelihood estimation from the fixed starting point
/// α = 0.05, β = 0.90, γ = 0, regressor coefficients 0 and ω matching the
/// sample variance.
pub fn fit(spec: &GarchSpec, returns: &[f64], exog: Option<&DMatrix<f64>>, options: FitOptions) -> Result<GarchFit> {
    spec.validate()?;
    if returns.len() < 250 {
        return Err(Error::invalid(format!("GARCH fit needs at least 250 returns, got {}", returns.len())));
    }
    check_exog(spec, spec.exogenous.len(), returns, exog)?;
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::invalid("returns contain non-finite values"));
    }

    let s = population_variance(returns).sqrt();
    if !(s > 0.0) {
        return Err(Error::invalid("returns have zero variance"));
    }
    let scaled_returns: Vec<f64> = returns.iter().map(|r| r / s).collect();
    let mut exog_scale = Vec::new();
    let scaled_exog = exog.map(|x| {
        let mut x = x.clone();
        for mut col in x.column_iter_mut() {
            let v: Vec<f64> = col.iter().copied().collect();
            let sd = population_variance(&v).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            col /= sd;
            exog_scale.push(sd);
        }
        x
    });
    let scaling = Scaling {
        returns: s,
        exog: exog_scale,
    };
    let scaled_spec = match spec.mean {
        MeanModel::Constant => spec.clone(),
        MeanModel::Fixed(m) => spec.clone().with_mean(MeanModel::Fixed(m / s)),
    };
    let objective = GarchObjective {
        spec: &scaled_spec,
        returns: &scaled_returns,
        exog: scaled_exog.as_ref(),
    };
    let mu0 = match scaled_spec.mean {
        MeanModel::Constant => mean(&scaled_returns),
        MeanModel::Fixed(m) => m,
    };
    let var0 = population_variance(&scaled_returns);
    let bfgs = BfgsOptions {
        max_iter: options.max_iter,
        gtol: options.gtol,
        converged_tol: 1e-5,
    };
    let betas: &[f64] = if options.multi_start { &[0.90, 0.50, 0.75, 0.93] } else { &[0.90] };
    let mut best: Option<optim::Minimum> = None;
    for &b in betas {
        let start = start_params(&scaled_spec, spec.exogenous.len(), mu0, var0, b);
        let theta0 = match reparam::to_unconstrained(&scaled_spec, &start.to_vec(&scaled_spec)) {
            Ok(t) => t,
            Err(e) if b == betas[0] => return Err(e),
            Err(_) => continue,
        };
        if !objective.value(&theta0).is_finite() {
            if best.is_none() && b == betas[0] {
                // surface the filter error at the documented starting point
                evaluate(&scaled_spec, &start, &scaled_returns, scaled_exog.as_ref(), false)?;
                return Err(Error::invalid("log-likelihood is not finite at the starting point"));
            }
            continue;
        }
        let m = optim::minimize(&objective, &theta0, bfgs);
        if best.as_ref().is_none_or(|bm| m.value < bm.value) {
            best = Some(m);
        }
    }
    let best = best.expect("at least one start evaluated");

    let (nat_scaled, jac_theta) = reparam::to_natural(&scaled_spec, &best.x);
    let scaled_params = GarchParams::from_vec(&scaled_spec, &nat_scaled);
    let (params, jac_scale) = scaling.unscale(spec, &scaled_params);

    let hess = optim::hessian_from_gradient(
        |th| {
            let mut g = vec![0.0; th.len()];
            objective.eval(th, &mut g);
            g
        },
        &best.x,
        1e-5,
    );
    let std_errors = hess.clone().cholesky().and_then(|chol| {
        let cov_theta = chol.inverse();
        let j = &jac_scale * &jac_theta;
        let cov = &j * cov_theta * j.transpose();
        let se: Vec<f64> = (0..cov.nrows()).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
        se.iter().all(|v| v.is_finite()).then_some(se)
    });

    let ev = evaluate(spec, &params, returns, exog, false)?;
    let std_residuals = ev
        .filter
        .residuals
        .iter()
        .zip(&ev.filter.variance)
        .map(|(e, h)| e / h.sqrt())
        .collect();
    Ok(GarchFit {
        spec: spec.clone(),
        params,
        std_errors,
        log_likelihood: ev.loglik,
        variance_path: ev.filter.variance,
        std_residuals,
        converged: best.converged,
        iterations: best.iterations,
        grad_norm: best.grad_norm,
        floor_hits: ev.filter.floor_hits,
    })
}

/// One step of the variance recursion from the latest variance and residual.
pub fn next_variance(
    kind: GarchKind,
    params: &GarchParams,
    last_variance: f64,
    last_residual: f64,
    last_exog: &[f64],
) -> Result<f64> {
    if last_exog.len() != params.exo_coefs.len() {
        return Err(Error::Dimension {
            expected: params.exo_coefs.len(),
            got: last_exog.len(),
        });
    }
    let exo: f64 = params.exo_coefs.iter().zip(last_exog).map(|(c, x)| c * x).sum();
    let e = last_residual;
    let h = match kind {
        GarchKind::Garch | GarchKind::Gjr => {
            let neg = if e < 0.0 { params.gamma } else { 0.0 };
            (params.omega + (params.alpha + neg) * e * e + params.beta * last_variance + exo).max(VARIANCE_FLOOR)
        }
        GarchKind::Egarch => {
            let z = e / last_variance.sqrt();
            (params.omega
                + params.alpha * (z.abs() - ABS_NORMAL_MEAN)
                + params.gamma * z
                + params.beta * last_variance.ln()
                + exo)
                .exp()
        }
    };
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::NonFinite {
            t: 0,
            stage: "one-step forecast",
        });
    }
    Ok(h)
}

/// σ²_{T+1} from a fit whose sample ends at `latest_return` (r_T) and the
/// regressor row for day T.
pub fn forecast_one_step(fit: &GarchFit, latest_return: f64, latest_exog: &[f64]) -> Result<f64> {
    let last = *fit
        .variance_path
        .last()
        .ok_or_else(|| Error::invalid("fit has an empty variance path"))?;
    next_variance(fit.spec.kind, &fit.params, last, latest_return - fit.params.mu, latest_exog)
}

pub fn persistence(fit: &GarchFit) -> f64 {
    fit.persistence()
}

/// Simulate `n` returns from a model without regressors, after `burn` discarded
/// steps, with standard normal innovations. Also returns the true variance path.
pub fn simulate(kind: GarchKind, params: &GarchParams, n: usize, burn: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = match kind {
        GarchKind::Egarch => (params.omega / (1.0 - params.beta)).exp(),
        _ => params.omega / (1.0 - persistence_of(kind, params)).max(1e-6),
    };
    let mut returns = Vec::with_capacity(n);
    let mut variances = Vec::with_capacity(n);
    let mut eps: f64 = 0.0;
    for t in 0..n + burn {
        if t > 0 {
            h = next_variance(kind, params, h, eps, &[]).unwrap_or(h);
        }
        let z: f64 = StandardNormal.sample(&mut rng);
        eps = h.sqrt() * z;
        if t >= burn {
            returns.push(params.mu + eps);
            variances.push(h);
        }
    }
    (returns, variances)
}
