//! One-hidden-layer tanh perceptron trained by full-batch gradient descent.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::linear::Standardization;
use crate::error::{Error, Result};

/// `ŷ = w2·tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
}

/// Gradient of the loss with the same layout as [`Network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DVector<f64>,
    pub b2: f64,
}

impl Network {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Network {
            w1: DMatrix::zeros(hidden, inputs),
            b1: DVector::zeros(hidden),
            w2: DVector::zeros(hidden),
            b2: 0.0,
        }
    }

    /// Symmetric uniform weights scaled by `1/√fan_in`, zero biases.
    pub fn random(inputs: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s1 = 1.0 / (inputs as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, inputs, |_, _| rng.random_range(-s1..s1));
        let w2 = DVector::from_fn(hidden, |_, _| rng.random_range(-s2..s2));
        Network {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: 0.0,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let h = (&self.w1 * DVector::from_column_slice(x) + &self.b1).map(f64::tanh);
        self.w2.dot(&h) + self.b2
    }

    /// Loss `(1/2n) Σ (ŷ − y)²` and its gradient over rows of `x`.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, y: &[f64]) -> (f64, Gradient) {
        let n = x.nrows() as f64;
        // hidden pre-activations for all rows at once: H × n
        let z = &self.w1 * x.transpose();
        let a = DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| (z[(i, j)] + self.b1[i]).tanh());
        let out = a.transpose() * &self.w2;
        let err = DVector::from_fn(y.len(), |i, _| out[i] + self.b2 - y[i]);
        let loss = err.norm_squared() / (2.0 * n);
        let w2 = &a * &err / n;
        let b2 = err.sum() / n;
        // δ_hidden = w2 ⊙ (1 − a²) ⊙ err
        let delta = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| self.w2[i] * (1.0 - a[(i, j)].powi(2)) * err[j]);
        let w1 = &delta * x / n;
        let b1 = DVector::from_fn(delta.nrows(), |i, _| delta.row(i).sum() / n);
        (loss, Gradient { w1, b1, w2, b2 })
    }

    pub fn step(&mut self, g: &Gradient, lr: f64) {
        self.w1 -= &g.w1 * lr;
        self.b1 -= &g.b1 * lr;
        self.w2 -= &g.w2 * lr;
        self.b2 -= g.b2 * lr;
    }

    /// Flattened parameters: W1 row-major, b1, w2, b2.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.transpose().iter().copied().collect();
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        v
    }

    pub fn from_vec(inputs: usize, hidden: usize, v: &[f64]) -> Self {
        let k = inputs * hidden;
        Network {
            w1: DMatrix::from_row_slice(hidden, inputs, &v[..k]),
            b1: DVector::from_column_slice(&v[k..k + hidden]),
            w2: DVector::from_column_slice(&v[k + hidden..k + 2 * hidden]),
            b2: v[k + 2 * hidden],
        }
    }
}

impl Gradient {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.w1.transpose().iter().copied().collect();
        v.extend(self.b1.iter());
        v.extend(self.w2.iter());
        v.push(self.b2);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub hidden_width: usize,
    pub epochs: usize,
    pub step_size: f64,
}

impl Default for MlpParams {
    fn default() -> Self {
        MlpParams {
            hidden_width: 16,
            epochs: 2000,
            step_size: 0.1,
        }
    }
}

/// Network plus the input and target standardisation it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub network: Network,
    pub input: Standardization,
    pub target_mean: f64,
    pub target_scale: f64,
    pub final_loss: f64,
}

impl MlpModel {
    pub fn n_features(&self) -> usize {
        self.network.inputs()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.target_mean + self.target_scale * self.network.forward(&self.input.apply_row(row))
    }
}

/// Run gradient descent on a raw network; errors if the loss blows up.
pub fn train(net: &mut Network, x: &DMatrix<f64>, y: &[f64], epochs: usize, step_size: f64) -> Result<f64> {
    let (initial, _) = net.loss_and_gradient(x, y);
    let mut loss = initial;
    for epoch in 0..epochs {
        let (l, g) = net.loss_and_gradient(x, y);
        loss = l;
        if !l.is_finite() || l > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Diverged(format!(
                "loss {l:.3e} at epoch {epoch} (initial {initial:.3e}); use a smaller step size"
            )));
        }
        net.step(&g, step_size);
    }
    Ok(loss)
}

pub fn fit_mlp(x: &DMatrix<f64>, y: &[f64], params: MlpParams, seed: u64) -> Result<MlpModel> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if params.hidden_width == 0 {
        return Err(Error::invalid("hidden_width must be at least 1"));
    }
    if y.len() < 2 {
        return Err(Error::invalid("MLP needs at least 2 rows"));
    }
    if !(params.step_size > 0.0 && params.step_size.is_finite()) {
        return Err(Error::invalid("step_size must be positive"));
    }
    let input = Standardization::fit(x);
    let xs = input.apply(x);
    let n = y.len() as f64;
    let target_mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - target_mean).powi(2)).sum::<f64>() / n).sqrt();
    let target_scale = if sd > 0.0 { sd } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - target_mean) / target_scale).collect();
    let mut network = Network::random(x.ncols(), params.hidden_width, seed);
    let final_loss = train(&mut network, &xs, &ys, params.epochs, params.step_size)?;
    Ok(MlpModel {
        network,
        input,
        target_mean,
        target_scale,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::central_gradient;

    #[test]
    fn zero_network_outputs_bias_and_steps_toward_mean() {
        let mut net = Network::zeros(3, 4);
        net.b2 = 1.5;
        assert_eq!(net.forward(&[0.3, -2.0, 7.0]), 1.5);
        let x = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
        let y = [4.0, 5.0, 6.0, 7.0, 8.0];
        let (_, g) = net.loss_and_gradient(&x, &y);
        assert!((g.b2 - (1.5 - 6.0)).abs() < 1e-15);
        assert!(g.w1.iter().all(|v| *v == 0.0) && g.w2.iter().all(|v| *v == 0.0));
        net.step(&g, 0.1);
        assert!(net.b2 > 1.5 && net.b2 < 6.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (p, h, n) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(3..12));
            let mut net = Network::random(p, h, seed);
            net.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            net.b2 = rng.random_range(-0.5..0.5);
            let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let (_, g) = net.loss_and_gradient(&x, &y);
            let f = |v: &[f64]| Network::from_vec(p, h, v).loss_and_gradient(&x, &y).0;
            let num = central_gradient(&f, &net.to_vec(), 1e-5);
            let ana = g.to_vec();
            let diff = ana.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            assert!(diff / scale < 1e-5, "seed {seed}: {}", diff / scale);
        }
    }

    #[test]
    fn learns_a_linear_map() {
        let x = DMatrix::from_fn(50, 1, |i, _| -1.0 + 2.0 * i as f64 / 49.0);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let m = fit_mlp(&x, &y, MlpParams { hidden_width: 4, epochs: 5000, step_size: 0.1 }, 7).unwrap();
        let mse = (0..50).map(|i| (m.predict_row(&[x[(i, 0)]]) - y[i]).powi(2)).sum::<f64>() / 50.0;
        assert!(mse < 0.01, "{mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * (j + 3)) % 7) as f64);
        let y: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let p = MlpParams { hidden_width: 5, epochs: 200, step_size: 0.05 };
        assert_eq!(fit_mlp(&x, &y, p, 3).unwrap(), fit_mlp(&x, &y, p, 3).unwrap());
    }

    #[test]
    fn huge_step_is_reported_as_divergence() {
        let x = DMatrix::from_fn(40, 2, |i, j| ((i * (j + 3)) % 7) as f64);
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let err = fit_mlp(&x, &y, MlpParams { hidden_width: 8, epochs: 500, step_size: 1e4 }, 1).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)), "{err}");
    }
}
