//! k-nearest-neighbour regression on standardised features.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::linear::Standardization;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnModel {
    pub k: usize,
    pub standardization: Standardization,
    /// Standardised training rows.
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
}

pub fn fit_knn(x: &DMatrix<f64>, y: &[f64], k: usize) -> Result<KnnModel> {
    if x.nrows() != y.len() {
        return Err(Error::Dimension {
            expected: x.nrows(),
            got: y.len(),
        });
    }
    if k == 0 || k > y.len() {
        return Err(Error::invalid(format!("k must lie in 1..={}, got {k}", y.len())));
    }
    let standardization = Standardization::fit(x);
    Ok(KnnModel {
        k,
        x: standardization.apply(x),
        standardization,
        y: y.to_vec(),
    })
}

impl KnnModel {
    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Indices of the `k` nearest training rows, nearest first; ties go to the lower index.
    pub fn neighbours(&self, row: &[f64]) -> Vec<usize> {
        let q = self.standardization.apply_row(row);
        let mut d: Vec<(f64, usize)> = self
            .x
            .row_iter()
            .enumerate()
            .map(|(i, r)| (r.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.into_iter().take(self.k).map(|(_, i)| i).collect()
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let idx = self.neighbours(row);
        idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> (DMatrix<f64>, Vec<f64>) {
        let x = DMatrix::from_fn(30, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.01 * i as f64);
        let y = (0..30).map(|i| i as f64 * 0.5 - 3.0).collect();
        (x, y)
    }

    #[test]
    fn k1_at_training_point_returns_its_target() {
        let (x, y) = data();
        let m = fit_knn(&x, &y, 1).unwrap();
        for i in 0..30 {
            let r: Vec<f64> = x.row(i).iter().copied().collect();
            assert_eq!(m.predict_row(&r), y[i]);
        }
    }

    #[test]
    fn k_equal_to_n_gives_global_mean() {
        let (x, y) = data();
        let m = fit_knn(&x, &y, 30).unwrap();
        let mean = y.iter().sum::<f64>() / 30.0;
        assert!((m.predict_row(&[100.0, -4.0]) - mean).abs() < 1e-12);
    }

    #[test]
    fn equidistant_tie_picks_lower_index() {
        // centred column, so the standardised query sits exactly between rows 0 and 1
        let x = DMatrix::from_column_slice(3, 1, &[-1.0, 1.0, 0.0]);
        let m = fit_knn(&x, &[10.0, 20.0, 30.0], 2).unwrap();
        assert_eq!(m.neighbours(&[0.0]), vec![2, 0]);
        let m = fit_knn(&x, &[10.0, 20.0, 30.0], 1).unwrap();
        assert_eq!(m.predict_row(&[-0.2]), 30.0);
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, 3.0, -3.0]);
        let m = fit_knn(&x, &[10.0, 20.0, 30.0, 40.0], 1).unwrap();
        assert_eq!(m.predict_row(&[0.0]), 10.0);
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 3.0, -3.0]);
        let m = fit_knn(&x, &[10.0, 20.0, 30.0, 40.0], 1).unwrap();
        assert_eq!(m.predict_row(&[0.0]), 10.0);
    }

    #[test]
    fn invariant_to_affine_rescaling() {
        let (x, y) = data();
        let mut x2 = x.clone();
        x2.column_mut(1).iter_mut().for_each(|v| *v = 250.0 * *v - 7.0);
        let (a, b) = (fit_knn(&x, &y, 4).unwrap(), fit_knn(&x2, &y, 4).unwrap());
        for q in [[2.0, 3.0], [7.5, 0.2], [10.0, 10.0]] {
            assert!((a.predict_row(&q) - b.predict_row(&[q[0], 250.0 * q[1] - 7.0])).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_k() {
        let (x, y) = data();
        assert!(fit_knn(&x, &y, 0).is_err());
        assert!(fit_knn(&x, &y, 31).is_err());
    }
}
