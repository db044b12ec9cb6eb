//! Lagged feature matrices for next-day variance regression.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AlignedPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub target: String,
    /// Return columns whose lagged squares enter as features.
    pub commodities: Vec<String>,
    /// Transformed exogenous columns, entered at lag 1.
    pub exogenous: Vec<String>,
    pub lags: usize,
}

impl FeatureSpec {
    pub fn new(target: impl Into<String>, commodities: Vec<String>, exogenous: Vec<String>) -> Self {
        FeatureSpec {
            target: target.into(),
            commodities,
            exogenous,
            lags: 1,
        }
    }

    pub fn with_lags(mut self, lags: usize) -> Self {
        self.lags = lags;
        self
    }

    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for c in &self.commodities {
            for l in 1..=self.lags {
                names.push(format!("{c}_sq_lag{l}"));
            }
        }
        for x in &self.exogenous {
            names.push(format!("{x}_lag1"));
        }
        names
    }
}

/// Row `i` predicts `y[i]`, the squared target return on `dates[i]`, from data
/// dated strictly earlier. `first_row` is the panel index of row 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub dates: Vec<NaiveDate>,
    pub x: DMatrix<f64>,
    pub feature_names: Vec<String>,
    pub y: Vec<f64>,
    pub target_name: String,
    pub first_row: usize,
}

impl FeatureMatrix {
    pub fn rows(&self) -> usize {
        self.y.len()
    }

    /// Feature-matrix row for panel index `t`, if it exists.
    pub fn row_of(&self, t: usize) -> Option<usize> {
        t.checked_sub(self.first_row).filter(|i| *i < self.rows())
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> (DMatrix<f64>, Vec<f64>) {
        let x = self.x.rows(range.start, range.len()).into_owned();
        (x, self.y[range].to_vec())
    }
}

pub fn build_features(panel: &AlignedPanel, spec: &FeatureSpec) -> Result<FeatureMatrix> {
    if spec.lags == 0 {
        return Err(Error::invalid("lags must be at least 1"));
    }
    if spec.commodities.is_empty() && spec.exogenous.is_empty() {
        return Err(Error::invalid("feature set is empty"));
    }
    let target = panel.values(&spec.target)?;
    let returns: Vec<&[f64]> = spec.commodities.iter().map(|c| panel.values(c)).collect::<Result<_>>()?;
    let exog: Vec<&[f64]> = spec.exogenous.iter().map(|c| panel.values(c)).collect::<Result<_>>()?;
    let n = panel.len();
    let first = spec.lags;
    if n < first + 2 {
        return Err(Error::invalid(format!(
            "{n} panel rows is too few for {} lags",
            spec.lags
        )));
    }
    let rows = n - first;
    let names = spec.feature_names();
    let x = DMatrix::from_fn(rows, names.len(), |i, j| {
        let t = first + i;
        let k = spec.lags * returns.len();
        if j < k {
            let (c, l) = (j / spec.lags, j % spec.lags + 1);
            returns[c][t - l].powi(2)
        } else {
            exog[j - k][t - 1]
        }
    });
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("feature matrix contains non-finite values"));
    }
    Ok(FeatureMatrix {
        dates: panel.dates[first..].to_vec(),
        x,
        feature_names: names,
        y: target[first..].iter().map(|r| r * r).collect(),
        target_name: spec.target.clone(),
        first_row: first,
    })
}

/// Feature vector for the day after the last panel row.
pub fn next_row(panel: &AlignedPanel, spec: &FeatureSpec) -> Result<Vec<f64>> {
    let n = panel.len();
    if n < spec.lags || spec.lags == 0 {
        return Err(Error::invalid(format!("{n} rows cannot supply {} lags", spec.lags)));
    }
    let mut row = Vec::with_capacity(spec.lags * spec.commodities.len() + spec.exogenous.len());
    for c in &spec.commodities {
        let v = panel.values(c)?;
        for l in 1..=spec.lags {
            row.push(v[n - l].powi(2));
        }
    }
    for x in &spec.exogenous {
        row.push(panel.values(x)?[n - 1]);
    }
    Ok(row)
}
