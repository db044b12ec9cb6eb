//! Rolling-window one-step-ahead backtests and forecast loss metrics.
//!
//! Out-of-sample day `t` is forecast by a model fitted on the
//! `in_sample_length` rows immediately before it. Models only ever receive
//! panel slices that end before `t`, so a forecast cannot see its own target.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bekk;
use crate::error::{Error, Result};
use crate::garch::{self, FitOptions, GarchSpec};
use crate::ingest::AlignedPanel;
use crate::ml::{self, FeatureSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub in_sample_length: usize,
    pub out_of_sample_length: usize,
    pub reestimation_period: usize,
    pub volatility_floor: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            in_sample_length: 3506,
            out_of_sample_length: 1000,
            reestimation_period: 1,
            volatility_floor: 0.0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self, rows: usize) -> Result<()> {
        let cfg = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if self.in_sample_length == 0 || self.out_of_sample_length == 0 {
            return Err(cfg("in_sample_length", "window lengths must be positive".into()));
        }
        if self.reestimation_period == 0 {
            return Err(cfg("reestimation_period", "must be at least 1".into()));
        }
        if !(self.volatility_floor >= 0.0 && self.volatility_floor.is_finite()) {
            return Err(cfg("volatility_floor", "must be finite and nonnegative".into()));
        }
        if self.in_sample_length + self.out_of_sample_length > rows {
            return Err(cfg(
                "out_of_sample_length",
                format!(
                    "{} in-sample + {} out-of-sample rows exceed the {rows} available",
                    self.in_sample_length, self.out_of_sample_length
                ),
            ));
        }
        Ok(())
    }

    /// Panel rows that receive a forecast.
    pub fn forecast_rows(&self) -> Range<usize> {
        self.in_sample_length..self.in_sample_length + self.out_of_sample_length
    }

    /// Training window for forecast row `t`.
    pub fn window(&self, t: usize) -> Range<usize> {
        t - self.in_sample_length..t
    }
}

/// A model that can be fitted on a slice of history.
pub trait Forecaster: Send + Sync {
    fn id(&self) -> String;
    /// `window` holds only rows dated before every day this fit will forecast.
    fn fit(&self, window: &AlignedPanel) -> Result<Box<dyn FittedForecaster>>;
}

pub trait FittedForecaster: Send {
    /// Variance forecast for the day after the last row of `history`.
    fn forecast(&self, history: &AlignedPanel) -> Result<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    /// Model refitted on this day's window.
    Refit,
    /// Model from an earlier window reused.
    Reused,
    /// Fit or forecast failed; the prediction is carried over.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub date: NaiveDate,
    pub model_id: String,
    pub row: usize,
    pub window_start: usize,
    pub window_end: usize,
    pub actual: f64,
    pub predicted: f64,
    pub status: RecordStatus,
}

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Backtest a single model against the squared returns of `target`.
pub fn backtest_model(
    panel: &AlignedPanel,
    target: &str,
    model: &dyn Forecaster,
    config: &BacktestConfig,
) -> Result<Vec<ForecastRecord>> {
    config.validate(panel.len())?;
    let returns = panel.values(target)?;
    let id = model.id();
    let mut fitted: Option<Box<dyn FittedForecaster>> = None;
    let mut previous: Option<f64> = None;
    let mut records = Vec::with_capacity(config.out_of_sample_length);
    for (k, t) in config.forecast_rows().enumerate() {
        let w = config.window(t);
        let history = panel.slice(w.clone());
        let mut status = RecordStatus::Reused;
        if k % config.reestimation_period == 0 {
            match model.fit(&history) {
                Ok(f) => {
                    fitted = Some(f);
                    status = RecordStatus::Refit;
                }
                Err(_) => status = RecordStatus::Failed,
            }
        }
        let raw = match (&fitted, status) {
            (Some(f), RecordStatus::Refit | RecordStatus::Reused) => f.forecast(&history).ok().filter(|v| v.is_finite()),
            _ => None,
        };
        let predicted = match raw {
            Some(v) => v.max(config.volatility_floor),
            None => {
                status = RecordStatus::Failed;
                previous.unwrap_or_else(|| mean_square(&returns[w.clone()]).max(config.volatility_floor))
            }
        };
        previous = Some(predicted);
        records.push(ForecastRecord {
            date: panel.dates[t],
            model_id: id.clone(),
            row: t,
            window_start: w.start,
            window_end: w.end,
            actual: returns[t] * returns[t],
            predicted,
            status,
        });
    }
    Ok(records)
}

/// Backtest several models in parallel; records come back grouped by model in
/// input order, then by date.
pub fn rolling_backtest(
    panel: &AlignedPanel,
    target: &str,
    models: &[Box<dyn Forecaster>],
    config: &BacktestConfig,
) -> Result<Vec<ForecastRecord>> {
    config.validate(panel.len())?;
    panel.values(target)?;
    let ids: BTreeSet<String> = models.iter().map(|m| m.id()).collect();
    if ids.len() != models.len() {
        return Err(Error::invalid("model ids must be distinct"));
    }
    let per_model: Vec<Vec<ForecastRecord>> = models
        .par_iter()
        .map(|m| backtest_model(panel, target, m.as_ref(), config))
        .collect::<Result<_>>()?;
    Ok(per_model.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricScale {
    /// Squared returns against variance forecasts.
    #[default]
    Variance,
    /// Absolute returns against volatility forecasts.
    Volatility,
}

impl std::str::FromStr for MetricScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(MetricScale::Variance),
            "volatility" => Ok(MetricScale::Volatility),
            other => Err(Error::invalid(format!("unknown metric scale '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean over-prediction, averaged over all forecasts.
    pub mmeo: f64,
    /// Mean under-prediction, averaged over all forecasts.
    pub mmeu: f64,
    pub n: usize,
}

pub const METRIC_NAMES: [&str; 4] = ["rmse", "mae", "mmeo", "mmeu"];

impl Metrics {
    pub fn compute(actual: &[f64], predicted: &[f64]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Dimension {
                expected: actual.len(),
                got: predicted.len(),
            });
        }
        if actual.is_empty() {
            return Err(Error::Empty("no forecasts to evaluate".into()));
        }
        let n = actual.len() as f64;
        let (mut over, mut under, mut sq) = (0.0, 0.0, 0.0);
        for (a, p) in actual.iter().zip(predicted) {
            let e = p - a;
            sq += e * e;
            if e > 0.0 {
                over += e;
            } else {
                under -= e;
            }
        }
        let (mmeo, mmeu) = (over / n, under / n);
        Ok(Metrics {
            rmse: (sq / n).sqrt(),
            // defined as the sum so the decomposition is exact in floating point
            mae: mmeo + mmeu,
            mmeo,
            mmeu,
            n: actual.len(),
        })
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "rmse" => Some(self.rmse),
            "mae" => Some(self.mae),
            "mmeo" => Some(self.mmeo),
            "mmeu" => Some(self.mmeu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model_id: String,
    pub metrics: Metrics,
    pub n_forecasts: usize,
    pub n_failed: usize,
    /// Metrics on which this model attains the minimum.
    pub best: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scale: MetricScale,
    pub models: Vec<ModelReport>,
}

fn mark_best(models: &mut [ModelReport]) {
    for name in METRIC_NAMES {
        let min = models
            .iter()
            .map(|m| m.metrics.get(name).unwrap())
            .fold(f64::INFINITY, f64::min);
        for m in models.iter_mut() {
            if m.metrics.get(name).unwrap() == min {
                m.best.push(name.to_string());
            }
        }
    }
}

/// Metrics per model, in order of first appearance in `records`.
pub fn evaluate(records: &[ForecastRecord], scale: MetricScale) -> Result<EvaluationReport> {
    if records.is_empty() {
        return Err(Error::Empty("no forecast records".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.model_id.as_str()) {
            order.push(&r.model_id);
        }
    }
    let transform = |v: f64| match scale {
        MetricScale::Variance => v,
        MetricScale::Volatility => v.max(0.0).sqrt(),
    };
    let mut models = Vec::with_capacity(order.len());
    for id in order {
        let group: Vec<&ForecastRecord> = records.iter().filter(|r| r.model_id == id).collect();
        let actual: Vec<f64> = group.iter().map(|r| transform(r.actual)).collect();
        let predicted: Vec<f64> = group.iter().map(|r| transform(r.predicted)).collect();
        models.push(ModelReport {
            model_id: id.to_string(),
            metrics: Metrics::compute(&actual, &predicted)?,
            n_forecasts: group.len(),
            n_failed: group.iter().filter(|r| r.status == RecordStatus::Failed).count(),
            best: Vec::new(),
        });
    }
    mark_best(&mut models);
    Ok(EvaluationReport { scale, models })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub commodity: String,
    pub model_id: String,
    pub rmse: f64,
    pub mae: f64,
    pub mmeo: f64,
    pub mmeu: f64,
    pub best: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub scale: MetricScale,
    pub rows: Vec<ComparisonRow>,
}

/// Models × commodities table; minima are marked within each commodity.
pub fn compare_report(reports: &[(String, EvaluationReport)]) -> Result<ComparisonTable> {
    let (_, first) = reports.first().ok_or_else(|| Error::Empty("no reports to compare".into()))?;
    let mut rows = Vec::new();
    for (commodity, report) in reports {
        let mut models = report.models.clone();
        models.iter_mut().for_each(|m| m.best.clear());
        mark_best(&mut models);
        for m in models {
            rows.push(ComparisonRow {
                commodity: commodity.clone(),
                model_id: m.model_id,
                rmse: m.metrics.rmse,
                mae: m.metrics.mae,
                mmeo: m.metrics.mmeo,
                mmeu: m.metrics.mmeu,
                best: m.best,
            });
        }
    }
    Ok(ComparisonTable { scale: first.scale, rows })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::invalid(e.to_string());
        w.write_record(["commodity", "model", "rmse", "mae", "mmeo", "mmeu", "best"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.commodity.clone(),
                r.model_id.clone(),
                r.rmse.to_string(),
                r.mae.to_string(),
                r.mmeo.to_string(),
                r.mmeu.to_string(),
                r.best.join(";"),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }
}

pub fn write_records(records: &[ForecastRecord], path: &Path) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["date", "model", "actual", "predicted", "refit_flag"]).map_err(io)?;
    for r in records {
        let status = match r.status {
            RecordStatus::Refit => "refit",
            RecordStatus::Reused => "reused",
            RecordStatus::Failed => "failed",
        };
        w.write_record([
            r.date.to_string(),
            r.model_id.clone(),
            r.actual.to_string(),
            r.predicted.to_string(),
            status.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Read a records CSV written by [`write_records`]. Row and window indices
/// are not stored, so `row` is the position within each model's sequence and
/// the window fields are zero.
pub fn read_records(path: &Path) -> Result<Vec<ForecastRecord>> {
    #[derive(Deserialize)]
    struct Row {
        date: NaiveDate,
        model: String,
        actual: f64,
        predicted: f64,
        refit_flag: RecordStatus,
    }
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(e.to_string()),
    })?;
    let mut counts = std::collections::HashMap::new();
    let mut out = Vec::new();
    for (i, row) in rd.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            row: i + 2,
            column: e.position().map(|_| "record".to_string()).unwrap_or_default(),
            message: e.to_string(),
        })?;
        let n = counts.entry(row.model.clone()).or_insert(0usize);
        out.push(ForecastRecord {
            date: row.date,
            model_id: row.model,
            row: *n,
            window_start: 0,
            window_end: 0,
            actual: row.actual,
            predicted: row.predicted,
            status: row.refit_flag,
        });
        *n += 1;
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("no records in {}", path.display())));
    }
    Ok(out)
}

/// Always predicts the same value.
pub struct ConstantForecaster {
    pub id: String,
    pub value: f64,
}

struct Constant(f64);

impl FittedForecaster for Constant {
    fn forecast(&self, _: &AlignedPanel) -> Result<f64> {
        Ok(self.0)
    }
}

impl Forecaster for ConstantForecaster {
    fn id(&self) -> String {
        self.id.clone()
    }
    fn fit(&self, _: &AlignedPanel) -> Result<Box<dyn FittedForecaster>> {
        Ok(Box::new(Constant(self.value)))
    }
}

fn exog_matrix(panel: &AlignedPanel, names: &[String]) -> Result<Option<DMatrix<f64>>> {
    if names.is_empty() {
        return Ok(None);
    }
    let cols: Vec<&[f64]> = names.iter().map(|n| panel.values(n)).collect::<Result<_>>()?;
    Ok(Some(DMatrix::from_fn(panel.len(), cols.len(), |i, j| cols[j][i])))
}

/// Univariate GARCH-family model on one return column.
pub struct GarchForecaster {
    pub spec: GarchSpec,
    pub target: String,
    pub options: FitOptions,
}

impl GarchForecaster {
    pub fn new(spec: GarchSpec, target: impl Into<String>) -> Self {
        GarchForecaster {
            spec,
            target: target.into(),
            options: FitOptions::default(),
        }
    }
}

struct FittedGarch {
    spec: GarchSpec,
    target: String,
    params: garch::GarchParams,
}

impl FittedForecaster for FittedGarch {
    fn forecast(&self, history: &AlignedPanel) -> Result<f64> {
        let r = history.values(&self.target)?;
        let x = exog_matrix(history, &self.spec.exogenous)?;
        let filt = garch::filter_variance(&self.spec, &self.params, r, x.as_ref())?;
        let last = r.len() - 1;
        let last_exog: Vec<f64> = x.as_ref().map(|m| m.row(last).iter().copied().collect()).unwrap_or_default();
        garch::next_variance(self.spec.kind, &self.params, filt.variance[last], filt.residuals[last], &last_exog)
    }
}

impl Forecaster for GarchForecaster {
    fn id(&self) -> String {
        let mut id = serde_json::to_value(self.spec.kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        if !self.spec.exogenous.is_empty() {
            id.push_str("-x");
        }
        id
    }

    fn fit(&self, window: &AlignedPanel) -> Result<Box<dyn FittedForecaster>> {
        let r = window.values(&self.target)?;
        let x = exog_matrix(window, &self.spec.exogenous)?;
        let fit = garch::fit(&self.spec, r, x.as_ref(), self.options)?;
        Ok(Box::new(FittedGarch {
            spec: self.spec.clone(),
            target: self.target.clone(),
            params: fit.params,
        }))
    }
}

/// BEKK on several return columns; forecasts the target's own variance.
pub struct BekkForecaster {
    pub series: Vec<String>,
    pub target: String,
    pub options: FitOptions,
}

struct FittedBekk {
    series: Vec<String>,
    index: usize,
    params: bekk::BekkParams,
    means: Vec<f64>,
}

fn return_matrix(panel: &AlignedPanel, series: &[String]) -> Result<DMatrix<f64>> {
    let cols: Vec<&[f64]> = series.iter().map(|n| panel.values(n)).collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(panel.len(), cols.len(), |i, j| cols[j][i]))
}

impl FittedForecaster for FittedBekk {
    fn forecast(&self, history: &AlignedPanel) -> Result<f64> {
        let r = return_matrix(history, &self.series)?;
        let resid = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| r[(i, j)] - self.means[j]);
        let path = bekk::filter_covariance(&self.params, &resid)?;
        let last: Vec<f64> = resid.row(r.nrows() - 1).iter().copied().collect();
        let h = bekk::next_covariance(&self.params, path.last().expect("nonempty history"), &last);
        Ok(h[(self.index, self.index)])
    }
}

impl Forecaster for BekkForecaster {
    fn id(&self) -> String {
        "bekk".into()
    }

    fn fit(&self, window: &AlignedPanel) -> Result<Box<dyn FittedForecaster>> {
        let index = self
            .series
            .iter()
            .position(|s| *s == self.target)
            .ok_or_else(|| Error::invalid(format!("target '{}' is not among the BEKK series", self.target)))?;
        let fit = bekk::fit(&return_matrix(window, &self.series)?, self.options)?;
        Ok(Box::new(FittedBekk {
            series: self.series.clone(),
            index,
            params: fit.params,
            means: fit.means,
        }))
    }
}

/// Regression model on lagged features, with validation-split grid search.
pub struct MlForecaster {
    pub id: String,
    pub grid: Vec<ModelSpec>,
    pub features: FeatureSpec,
    pub validation_fraction: f64,
    pub seed: u64,
}

struct FittedMl {
    model: ml::Model,
    features: FeatureSpec,
}

impl FittedForecaster for FittedMl {
    fn forecast(&self, history: &AlignedPanel) -> Result<f64> {
        self.model.predict_row(&ml::next_row(history, &self.features)?)
    }
}

impl Forecaster for MlForecaster {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn fit(&self, window: &AlignedPanel) -> Result<Box<dyn FittedForecaster>> {
        let fm = ml::build_features(window, &self.features)?;
        let (_, model) = ml::select_and_fit(&self.grid, &fm.x, &fm.y, self.validation_fraction, self.seed)?;
        Ok(Box::new(FittedMl {
            model,
            features: self.features.clone(),
        }))
    }
}
