//! Regression models for next-day variance.
//!
//! Every fitted model is a [`Model`]; [`ModelSpec`] describes how to fit one
//! and is what configuration files and the command line carry.

pub mod features;
pub mod knn;
pub mod linear;
pub mod mlp;
pub mod tree;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{build_features, next_row, FeatureMatrix, FeatureSpec};
pub use knn::{fit_knn, KnnModel};
pub use linear::{fit_linear, LinearModel, Penalty, Standardization};
pub use mlp::{fit_mlp, train, Gradient, MlpModel, MlpParams, Network};
pub use tree::{
    fit_boosted, fit_boosted_with_trace, fit_forest, fit_tree, BoostParams, Combiner, ForestParams, TreeEnsemble, TreeNode, TreeParams,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Model {
    Linear(LinearModel),
    Trees(TreeEnsemble),
    Knn(KnnModel),
    Mlp(MlpModel),
}

impl Model {
    pub fn n_features(&self) -> usize {
        match self {
            Model::Linear(m) => m.n_features(),
            Model::Trees(m) => m.n_features,
            Model::Knn(m) => m.n_features(),
            Model::Mlp(m) => m.n_features(),
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> Result<f64> {
        if row.len() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: row.len(),
            });
        }
        Ok(match self {
            Model::Linear(m) => m.predict_row(row),
            Model::Trees(m) => m.predict_row(row),
            Model::Knn(m) => m.predict_row(row),
            Model::Mlp(m) => m.predict_row(row),
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Dimension {
                expected: self.n_features(),
                got: x.ncols(),
            });
        }
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                row.iter_mut().zip(x.row(i).iter()).for_each(|(r, v)| *r = *v);
                self.predict_row(&row)
            })
            .collect()
    }

    pub fn as_trees(&self) -> Option<&TreeEnsemble> {
        match self {
            Model::Trees(t) => Some(t),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum ModelSpec {
    Ols,
    Ridge { lambda: f64 },
    Lasso { lambda: f64 },
    Enet { lambda: f64, mix: f64 },
    Tree(TreeParams),
    Forest(ForestParams),
    Boost(BoostParams),
    Knn { k: usize },
    Mlp(MlpParams),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ols => "ols",
            ModelSpec::Ridge { .. } => "ridge",
            ModelSpec::Lasso { .. } => "lasso",
            ModelSpec::Enet { .. } => "enet",
            ModelSpec::Tree(_) => "tree",
            ModelSpec::Forest(_) => "forest",
            ModelSpec::Boost(_) => "boost",
            ModelSpec::Knn { .. } => "knn",
            ModelSpec::Mlp(_) => "mlp",
        }
    }

    /// Default spec for a model name as used on the command line.
    pub fn default_for(name: &str) -> Result<Self> {
        Ok(match name {
            "ols" => ModelSpec::Ols,
            "ridge" => ModelSpec::Ridge { lambda: 0.1 },
            "lasso" => ModelSpec::Lasso { lambda: 0.01 },
            "enet" => ModelSpec::Enet { lambda: 0.01, mix: 0.5 },
            "tree" => ModelSpec::Tree(TreeParams::default()),
            "forest" => ModelSpec::Forest(ForestParams::default()),
            "boost" => ModelSpec::Boost(BoostParams::default()),
            "knn" => ModelSpec::Knn { k: 20 },
            "mlp" => ModelSpec::Mlp(MlpParams::default()),
            other => return Err(Error::invalid(format!("unknown model '{other}'"))),
        })
    }

    /// Small fixed hyperparameter grid searched on the validation split.
    pub fn default_grid(name: &str) -> Result<Vec<Self>> {
        Ok(match name {
            "ols" => vec![ModelSpec::Ols],
            "ridge" => [0.01, 0.1, 1.0].map(|lambda| ModelSpec::Ridge { lambda }).to_vec(),
            "lasso" => [0.001, 0.01, 0.1].map(|lambda| ModelSpec::Lasso { lambda }).to_vec(),
            "enet" => [0.001, 0.01, 0.1].map(|lambda| ModelSpec::Enet { lambda, mix: 0.5 }).to_vec(),
            "tree" => [2, 4, 6]
                .map(|max_depth| ModelSpec::Tree(TreeParams { max_depth, min_leaf: 10 }))
                .to_vec(),
            "forest" => [4, 6]
                .map(|max_depth| ModelSpec::Forest(ForestParams { max_depth, n_trees: 50, ..Default::default() }))
                .to_vec(),
            "boost" => [2, 3]
                .map(|d| ModelSpec::Boost(BoostParams { max_depth: Some(d), n_rounds: 100, ..Default::default() }))
                .to_vec(),
            "knn" => [10, 25, 50].map(|k| ModelSpec::Knn { k }).to_vec(),
            "mlp" => [4, 16]
                .map(|hidden_width| ModelSpec::Mlp(MlpParams { hidden_width, epochs: 500, step_size: 0.05 }))
                .to_vec(),
            other => return Err(Error::invalid(format!("unknown model '{other}'"))),
        })
    }

    pub fn fit(&self, x: &DMatrix<f64>, y: &[f64], seed: u64) -> Result<Model> {
        Ok(match self {
            ModelSpec::Ols => Model::Linear(fit_linear(x, y, Penalty::None)?),
            ModelSpec::Ridge { lambda } => Model::Linear(fit_linear(x, y, Penalty::Ridge { lambda: *lambda })?),
            ModelSpec::Lasso { lambda } => Model::Linear(fit_linear(x, y, Penalty::Lasso { lambda: *lambda })?),
            ModelSpec::Enet { lambda, mix } => Model::Linear(fit_linear(
                x,
                y,
                Penalty::ElasticNet {
                    lambda: *lambda,
                    mix: *mix,
                },
            )?),
            ModelSpec::Tree(p) => Model::Trees(fit_tree(x, y, *p)?),
            ModelSpec::Forest(p) => Model::Trees(fit_forest(x, y, *p, seed)?),
            ModelSpec::Boost(p) => Model::Trees(fit_boosted(x, y, *p)?),
            ModelSpec::Knn { k } => Model::Knn(fit_knn(x, y, (*k).min(y.len()))?),
            ModelSpec::Mlp(p) => Model::Mlp(fit_mlp(x, y, *p, seed)?),
        })
    }
}

/// Pick the grid entry with the lowest MSE on the trailing `validation`
/// fraction of rows, then refit it on all rows.
pub fn select_and_fit(grid: &[ModelSpec], x: &DMatrix<f64>, y: &[f64], validation: f64, seed: u64) -> Result<(ModelSpec, Model)> {
    let first = grid.first().ok_or_else(|| Error::invalid("empty hyperparameter grid"))?;
    if grid.len() == 1 || validation <= 0.0 {
        return Ok((first.clone(), first.fit(x, y, seed)?));
    }
    let n = y.len();
    let n_val = ((n as f64) * validation).round() as usize;
    let n_train = n - n_val;
    if n_val == 0 || n_train < 3 {
        return Ok((first.clone(), first.fit(x, y, seed)?));
    }
    let xt = x.rows(0, n_train).into_owned();
    let xv = x.rows(n_train, n_val).into_owned();
    let mut best: Option<(f64, &ModelSpec)> = None;
    for spec in grid {
        let Ok(model) = spec.fit(&xt, &y[..n_train], seed) else { continue };
        let pred = model.predict(&xv)?;
        let mse = pred.iter().zip(&y[n_train..]).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n_val as f64;
        if mse.is_finite() && best.is_none_or(|(b, _)| mse < b) {
            best = Some((mse, spec));
        }
    }
    let spec = best.map_or(first, |(_, s)| s);
    Ok((spec.clone(), spec.fit(x, y, seed)?))
}
