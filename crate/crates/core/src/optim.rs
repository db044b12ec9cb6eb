//! Deterministic BFGS minimiser and finite-difference helpers.
//!
//! Estimation maps constrained parameters onto an unconstrained space, so a
//! plain quasi-Newton method with a weak-Wolfe bisection line search suffices.
//! Infeasible points are signalled by returning `+inf` from the objective.

use nalgebra::{DMatrix, DVector};

pub trait Objective {
    /// Value at `x`; fills `grad` with the gradient. Infeasible points return `+inf`.
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.eval(x, &mut g)
    }
}

/// Wraps a value-only function with central-difference gradients.
pub struct NumericalGradient<F> {
    pub f: F,
    pub rel_step: f64,
}

impl<F: Fn(&[f64]) -> f64> Objective for NumericalGradient<F> {
    fn eval(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = (self.f)(x);
        if !v.is_finite() {
            return f64::INFINITY;
        }
        let g = central_gradient(&self.f, x, self.rel_step);
        if g.iter().any(|gi| !gi.is_finite()) {
            return f64::INFINITY;
        }
        grad.copy_from_slice(&g);
        v
    }

    fn value(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the gradient norm falls below this.
    pub gtol: f64,
    /// Gradient norm at or below which the result is flagged as converged.
    pub converged_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 500,
            gtol: 1e-8,
            converged_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Step {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
}

/// Weak-Wolfe bisection (Lewis–Overton) with an approximate sufficient-decrease
/// test so that progress continues when `f` differences drop below roundoff.
fn line_search<O: Objective>(obj: &O, x: &[f64], f0: f64, dphi0: f64, d: &[f64]) -> Option<Step> {
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let eps_f = 1e-12 * (1.0 + f0.abs());
    let n = x.len();
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut alpha = 1.0;
    let mut fallback: Option<Step> = None;
    let mut xt = vec![0.0; n];
    let mut g = vec![0.0; n];
    for _ in 0..80 {
        for i in 0..n {
            xt[i] = x[i] + alpha * d[i];
        }
        let f = obj.eval(&xt, &mut g);
        let dphi = dot(&g, d);
        let armijo = f.is_finite() && f <= f0 + C1 * alpha * dphi0;
        let approx = f.is_finite() && f <= f0 + eps_f && dphi <= 0.5 * dphi0.abs();
        if !(armijo || approx) {
            hi = alpha;
        } else if dphi < C2 * dphi0 {
            if armijo && f < f0 {
                fallback = Some(Step { alpha, f, g: g.clone() });
            }
            lo = alpha;
        } else {
            return Some(Step { alpha, f, g });
        }
        alpha = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
        if hi.is_finite() && (hi - lo) <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    fallback
}

/// Minimise `obj` from `x0` with BFGS on the inverse Hessian.
pub fn minimize<O: Objective>(obj: &O, x0: &[f64], opts: BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.eval(&x, &mut g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first = true;
    let mut iterations = 0;
    if f.is_finite() {
        while iterations < opts.max_iter && norm(&g) > opts.gtol {
            let gv = DVector::from_column_slice(&g);
            let mut d: Vec<f64> = if first {
                let gn = norm(&g);
                g.iter().map(|v| -v / gn).collect()
            } else {
                (-(&h * &gv)).iter().copied().collect()
            };
            let mut dphi0 = dot(&g, &d);
            if dphi0 >= 0.0 {
                // lost descent; restart from steepest descent
                h = DMatrix::identity(n, n);
                first = true;
                let gn = norm(&g);
                d = g.iter().map(|v| -v / gn).collect();
                dphi0 = -gn;
            }
            let Some(step) = line_search(obj, &x, f, dphi0, &d) else {
                break;
            };
            iterations += 1;
            let s = DVector::from_iterator(n, d.iter().map(|di| step.alpha * di));
            let y = DVector::from_iterator(n, step.g.iter().zip(&g).map(|(a, b)| a - b));
            for i in 0..n {
                x[i] += s[i];
            }
            f = step.f;
            g = step.g;
            let sy = s.dot(&y);
            if sy > 1e-300 {
                if first {
                    h = DMatrix::identity(n, n) * (sy / y.norm_squared());
                    first = false;
                }
                let rho = 1.0 / sy;
                let hy = &h * &y;
                let yhy = y.dot(&hy);
                // H+ = H - ρ(H y s' + s y' H) + (ρ² y'Hy + ρ) s s'
                h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
                h += &s * s.transpose() * (rho * rho * yhy + rho);
            }
        }
    }
    let grad_norm = if f.is_finite() { norm(&g) } else { f64::INFINITY };
    Minimum {
        converged: grad_norm <= opts.converged_tol,
        x,
        value: f,
        gradient: g,
        grad_norm,
        iterations,
    }
}

fn step_size(xi: f64, rel: f64) -> f64 {
    rel * xi.abs().max(1.0)
}

/// Central-difference gradient with step `rel_step · max(|x_i|, 1)`.
pub fn central_gradient<F: Fn(&[f64]) -> f64 + ?Sized>(f: &F, x: &[f64], rel_step: f64) -> Vec<f64> {
    let mut xt = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step_size(x[i], rel_step);
            xt[i] = x[i] + h;
            let fp = f(&xt);
            xt[i] = x[i] - h;
            let fm = f(&xt);
            xt[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Symmetrised Jacobian of a gradient function by central differences.
pub fn hessian_from_gradient<G: Fn(&[f64]) -> Vec<f64>>(grad: G, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xt = x.to_vec();
    for j in 0..n {
        let h = step_size(x[j], rel_step);
        xt[j] = x[j] + h;
        let gp = grad(&xt);
        xt[j] = x[j] - h;
        let gm = grad(&xt);
        xt[j] = x[j];
        for i in 0..n {
            hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&hess + hess.transpose()) * 0.5
}

/// Hessian of a value-only function by second-order central differences.
pub fn hessian_from_values<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], rel_step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut xt = x.to_vec();
    let f0 = f(x);
    let hs: Vec<f64> = x.iter().map(|&xi| step_size(xi, rel_step)).collect();
    for i in 0..n {
        xt[i] = x[i] + hs[i];
        let fp = f(&xt);
        xt[i] = x[i] - hs[i];
        let fm = f(&xt);
        xt[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (hs[i] * hs[i]);
        for j in 0..i {
            let mut eval = |si: f64, sj: f64| {
                xt[i] = x[i] + si * hs[i];
                xt[j] = x[j] + sj * hs[j];
                let v = f(&xt);
                xt[i] = x[i];
                xt[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * hs[i] * hs[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Square roots of the diagonal of `hess⁻¹` when `hess` is positive definite.
pub fn std_errors_from_hessian(hess: &DMatrix<f64>) -> Option<Vec<f64>> {
    if hess.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = hess.clone().cholesky()?;
    let inv = chol.inverse();
    let se: Vec<f64> = (0..inv.nrows()).map(|i| inv[(i, i)].sqrt()).collect();
    se.iter().all(|v| v.is_finite()).then_some(se)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn eval(&self, x: &[f64], g: &mut [f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
    }

    #[test]
    fn bfgs_solves_rosenbrock() {
        let m = minimize(&Rosenbrock, &[-1.2, 1.0], BfgsOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6, "{:?}", m.x);
    }

    #[test]
    fn bfgs_is_deterministic() {
        let a = minimize(&Rosenbrock, &[-1.2, 1.0], BfgsOptions::default());
        let b = minimize(&Rosenbrock, &[-1.2, 1.0], BfgsOptions::default());
        assert_eq!(a.x, b.x);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn infeasible_region_is_avoided() {
        // log barrier: minimum of x - ln x at x = 1, infinite for x <= 0
        let obj = NumericalGradient {
            f: |x: &[f64]| if x[0] <= 0.0 { f64::INFINITY } else { x[0] - x[0].ln() },
            rel_step: 1e-6,
        };
        let m = minimize(&obj, &[5.0], BfgsOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_hessians_are_exact() {
        let f = |x: &[f64]| 3.0 * x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1];
        let hv = hessian_from_values(f, &[0.3, -0.7], 1e-4);
        let hg = hessian_from_gradient(|x| central_gradient(&f, x, 1e-6), &[0.3, -0.7], 1e-4);
        for h in [hv, hg] {
            assert!((h[(0, 0)] - 6.0).abs() < 1e-5);
            assert!((h[(0, 1)] - 1.0).abs() < 1e-5);
            assert!((h[(1, 1)] - 4.0).abs() < 1e-5);
        }
        let se = std_errors_from_hessian(&DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 0.25])).unwrap();
        assert_eq!(se, vec![0.5, 2.0]);
        assert!(std_errors_from_hessian(&DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_none());
    }
}
