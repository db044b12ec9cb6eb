//! JSON run configuration, versioned model artifacts and the end-to-end run.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bekk::{self, BekkFit};
use crate::diagnostics::{self, TestResult};
use crate::error::{Error, Result};
use crate::garch::{self, FitOptions, GarchFit, GarchKind, GarchSpec};
use crate::harness::{
    self, BacktestConfig, BekkForecaster, ComparisonTable, EvaluationReport, Forecaster, GarchForecaster,
    MetricScale, MlForecaster,
};
use crate::ingest::{self, AlignedPanel, TransformOptions, TransformTag};
use crate::ml::{self, FeatureSpec, Model, ModelSpec, TreeEnsemble};
use crate::shap;

pub const ARTIFACT_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "ENERVOL_OUTPUT_DIR";
pub const DEFAULT_OUTPUT_DIR: &str = "enervol-out";

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Per-model seed: depends only on the run seed and the model's own id.
pub fn sub_seed(seed: u64, model_id: &str) -> u64 {
    splitmix64(seed ^ fnv1a(model_id.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub path: PathBuf,
    /// CSV header → series name. Empty keeps every column under its header.
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelEntry {
    Garch {
        kind: GarchKind,
        /// Add the configured exogenous columns to the variance equation.
        #[serde(default)]
        exogenous: bool,
    },
    Bekk,
    Ml {
        model: String,
        /// Candidate hyperparameters; defaults to the model's built-in grid.
        #[serde(default)]
        grid: Option<Vec<ModelSpec>>,
    },
}

impl ModelEntry {
    pub fn id(&self) -> String {
        match self {
            ModelEntry::Garch { kind, exogenous } => {
                let k = match kind {
                    GarchKind::Garch => "garch",
                    GarchKind::Egarch => "egarch",
                    GarchKind::Gjr => "gjr",
                };
                if *exogenous {
                    format!("{k}-x")
                } else {
                    k.to_string()
                }
            }
            ModelEntry::Bekk => "bekk".into(),
            ModelEntry::Ml { model, .. } => model.clone(),
        }
    }

    fn grid(&self) -> Result<Vec<ModelSpec>> {
        match self {
            ModelEntry::Ml { grid: Some(g), .. } if !g.is_empty() => Ok(g.clone()),
            ModelEntry::Ml { model, .. } => ModelSpec::default_grid(model),
            _ => Err(Error::invalid("not a regression model entry")),
        }
    }
}

fn default_lags() -> usize {
    1
}
fn default_validation() -> f64 {
    0.2
}
fn default_diag_lags() -> usize {
    40
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Vec<DataSource>,
    /// Transform tag per series name.
    pub transforms: BTreeMap<String, TransformTag>,
    #[serde(default)]
    pub asinh_fallback: bool,
    /// Return columns modelled and used as lagged features.
    pub commodities: Vec<String>,
    #[serde(default)]
    pub exogenous: Vec<String>,
    /// Series forecast in the backtest; defaults to every commodity.
    #[serde(default)]
    pub targets: Vec<String>,
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub backtest: BacktestConfig,
    #[serde(default = "default_lags")]
    pub lags: usize,
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub scale: MetricScale,
    #[serde(default = "default_diag_lags")]
    pub diagnostic_lags: usize,
    #[serde(default = "default_true")]
    pub explain: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| match Error::from_json(e, text) {
            Error::Json { offset, message } => config_err("config", format!("{message} (byte offset {offset})")),
            other => other,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn targets(&self) -> Vec<String> {
        if self.targets.is_empty() {
            self.commodities.clone()
        } else {
            self.targets.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_empty() {
            return Err(config_err("data", "at least one data source is required"));
        }
        if self.commodities.is_empty() {
            return Err(config_err("commodities", "at least one commodity is required"));
        }
        for (field, names) in [("commodities", &self.commodities), ("exogenous", &self.exogenous)] {
            for n in names {
                if !self.transforms.contains_key(n) {
                    return Err(config_err(field, format!("column '{n}' has no entry in transforms")));
                }
            }
        }
        for t in &self.targets {
            if !self.commodities.contains(t) {
                return Err(config_err("targets", format!("target '{t}' is not one of the commodities")));
            }
        }
        if self.models.is_empty() {
            return Err(config_err("models", "at least one model is required"));
        }
        let mut seen = BTreeSet::new();
        for m in &self.models {
            let id = m.id();
            if !seen.insert(id.clone()) {
                return Err(config_err("models", format!("duplicate model id '{id}'")));
            }
            if let ModelEntry::Ml { model, .. } = m {
                ModelSpec::default_for(model).map_err(|e| config_err("models", e.to_string()))?;
            }
            if matches!(m, ModelEntry::Garch { exogenous: true, .. }) && self.exogenous.is_empty() {
                return Err(config_err("models", format!("model '{id}' needs exogenous columns")));
            }
        }
        if self.lags == 0 {
            return Err(config_err("lags", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(config_err("validation_fraction", "must lie in [0, 1)"));
        }
        if self.diagnostic_lags == 0 {
            return Err(config_err("diagnostic_lags", "must be at least 1"));
        }
        let b = &self.backtest;
        if b.reestimation_period == 0 {
            return Err(config_err("backtest.reestimation_period", "must be at least 1"));
        }
        if b.in_sample_length == 0 || b.out_of_sample_length == 0 {
            return Err(config_err("backtest", "window lengths must be positive"));
        }
        Ok(())
    }

    pub fn feature_spec(&self, target: &str) -> FeatureSpec {
        FeatureSpec::new(target, self.commodities.clone(), self.exogenous.clone()).with_lags(self.lags)
    }

    /// Output directory: explicit override, then config, then environment, then default.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

/// Load, align and transform CSV sources. Relative paths resolve against
/// `base_dir`; series without a transform tag are dropped.
pub fn ingest_sources(
    sources: &[DataSource],
    transforms: &BTreeMap<String, TransformTag>,
    asinh_fallback: bool,
    base_dir: &Path,
) -> Result<AlignedPanel> {
    let mut series = Vec::new();
    for src in sources {
        let path = if src.path.is_absolute() {
            src.path.clone()
        } else {
            base_dir.join(&src.path)
        };
        let schema: Vec<(String, String)> = src.columns.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        series.extend(ingest::load_csv(&path, &schema)?);
    }
    let names: BTreeSet<&str> = series.iter().map(|s| s.name.as_str()).collect();
    for n in transforms.keys() {
        if !names.contains(n.as_str()) {
            return Err(config_err("transforms", format!("no data source provides column '{n}'")));
        }
    }
    series.retain(|s| transforms.contains_key(&s.name));
    let calendar = ingest::daily_calendar(&series)?;
    let levels = ingest::align_daily(&series, &calendar)?;
    let tags: Vec<(String, TransformTag)> = transforms.iter().map(|(k, v)| (k.clone(), *v)).collect();
    ingest::transform(&levels, &tags, TransformOptions { asinh_fallback })
}

pub fn load_panel(config: &RunConfig, base_dir: &Path) -> Result<AlignedPanel> {
    ingest_sources(&config.data, &config.transforms, config.asinh_fallback, base_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRow {
    pub series: String,
    #[serde(flatten)]
    pub result: TestResult,
}

/// Normality, stationarity and ARCH tests for each named column.
pub fn diagnose(panel: &AlignedPanel, columns: &[String], lags: usize) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    for name in columns {
        let x = panel.values(name)?;
        let tests = [
            diagnostics::jarque_bera(x),
            diagnostics::adf(x, 12),
            diagnostics::ljung_box(x, lags),
            diagnostics::ljung_box_squared(x, lags),
            diagnostics::arch_lm(x, lags),
        ];
        for t in tests.into_iter().flatten() {
            rows.push(DiagnosticRow {
                series: name.clone(),
                result: t,
            });
        }
    }
    Ok(rows)
}

fn row_major(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// JSON fit record for a univariate model, with residual diagnostics.
pub fn garch_summary(fit: &GarchFit, lags: usize) -> Value {
    let names = fit.spec.parameter_names();
    let p = &fit.params;
    let mut values: Vec<f64> = vec![p.mu, p.omega, p.alpha];
    if fit.spec.kind != GarchKind::Garch {
        values.push(p.gamma);
    }
    values.push(p.beta);
    values.extend(&p.exo_coefs);
    let params: BTreeMap<&String, f64> = names.iter().zip(&values).map(|(n, v)| (n, *v)).collect();
    let se = fit
        .std_errors
        .as_ref()
        .map(|se| names.iter().zip(se).map(|(n, v)| (n.clone(), *v)).collect::<BTreeMap<_, _>>());
    json!({
        "model": fit.spec.kind,
        "exogenous": fit.spec.exogenous,
        "params": params,
        "std_errors": se,
        "log_likelihood": fit.log_likelihood,
        "persistence": fit.persistence(),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "floor_hits": fit.floor_hits,
        "ljung_box_squared": diagnostics::ljung_box_squared(&fit.std_residuals, lags).ok(),
        "arch_lm": diagnostics::arch_lm(&fit.std_residuals, lags).ok(),
    })
}

pub fn bekk_summary(fit: &BekkFit, series: &[String]) -> Value {
    json!({
        "series": series,
        "C": row_major(&fit.params.c),
        "A": row_major(&fit.params.a),
        "B": row_major(&fit.params.b),
        "std_errors": fit.std_errors.as_ref().map(|s| json!({
            "C": row_major(&s.c), "A": row_major(&s.a), "B": row_major(&s.b),
        })),
        "log_likelihood": fit.log_likelihood,
        "spectral_radius": fit.spectral_radius,
        "stationary": fit.stationary,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "q2": fit.q2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum ArtifactPayload {
    Garch(GarchFit),
    Bekk(BekkFit),
    Ml(Model),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub window_start: Option<NaiveDate>,
    pub window_end: Option<NaiveDate>,
    pub target: Option<String>,
    pub series: Vec<String>,
    pub log_likelihood: Option<f64>,
    pub training_loss: Option<f64>,
    pub converged: Option<bool>,
    pub features: Option<FeatureSpec>,
    pub feature_names: Vec<String>,
    pub selected: Option<ModelSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub version: u32,
    pub model_id: String,
    pub payload: ArtifactPayload,
    pub metadata: FitMetadata,
}

impl ModelArtifact {
    pub fn new(model_id: impl Into<String>, payload: ArtifactPayload, metadata: FitMetadata) -> Self {
        ModelArtifact {
            version: ARTIFACT_VERSION,
            model_id: model_id.into(),
            payload,
            metadata,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::from_json(e, text))?;
        let found = value.get("version").and_then(Value::as_u64).ok_or_else(|| Error::Json {
            offset: 0,
            message: "artifact has no numeric 'version' field".into(),
        })?;
        if found != ARTIFACT_VERSION as u64 {
            return Err(Error::Version {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: ARTIFACT_VERSION,
            });
        }
        serde_json::from_str(text).map_err(|e| Error::from_json(e, text))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn tree_ensemble(&self) -> Option<&TreeEnsemble> {
        match &self.payload {
            ArtifactPayload::Ml(m) => m.as_trees(),
            _ => None,
        }
    }
}

fn window_dates(panel: &AlignedPanel) -> (Option<NaiveDate>, Option<NaiveDate>) {
    (panel.dates.first().copied(), panel.dates.last().copied())
}

fn exog_matrix(panel: &AlignedPanel, names: &[String]) -> Result<Option<DMatrix<f64>>> {
    if names.is_empty() {
        return Ok(None);
    }
    let cols: Vec<&[f64]> = names.iter().map(|n| panel.values(n)).collect::<Result<_>>()?;
    Ok(Some(DMatrix::from_fn(panel.len(), cols.len(), |i, j| cols[j][i])))
}

pub fn fit_garch_artifact(panel: &AlignedPanel, target: &str, spec: &GarchSpec) -> Result<ModelArtifact> {
    let r = panel.values(target)?;
    let x = exog_matrix(panel, &spec.exogenous)?;
    let fit = garch::fit(spec, r, x.as_ref(), FitOptions::default())?;
    let (start, end) = window_dates(panel);
    let id = ModelEntry::Garch {
        kind: spec.kind,
        exogenous: !spec.exogenous.is_empty(),
    }
    .id();
    let metadata = FitMetadata {
        window_start: start,
        window_end: end,
        target: Some(target.to_string()),
        series: vec![target.to_string()],
        log_likelihood: Some(fit.log_likelihood),
        training_loss: None,
        converged: Some(fit.converged),
        features: None,
        feature_names: spec.exogenous.clone(),
        selected: None,
    };
    Ok(ModelArtifact::new(id, ArtifactPayload::Garch(fit), metadata))
}

pub fn fit_bekk_artifact(panel: &AlignedPanel, series: &[String]) -> Result<ModelArtifact> {
    let cols: Vec<&[f64]> = series.iter().map(|n| panel.values(n)).collect::<Result<_>>()?;
    let r = DMatrix::from_fn(panel.len(), cols.len(), |i, j| cols[j][i]);
    let fit = bekk::fit(&r, FitOptions::default())?;
    let (start, end) = window_dates(panel);
    let metadata = FitMetadata {
        window_start: start,
        window_end: end,
        target: None,
        series: series.to_vec(),
        log_likelihood: Some(fit.log_likelihood),
        training_loss: None,
        converged: Some(fit.converged),
        features: None,
        feature_names: Vec::new(),
        selected: None,
    };
    Ok(ModelArtifact::new("bekk", ArtifactPayload::Bekk(fit), metadata))
}

pub fn fit_ml_artifact(
    panel: &AlignedPanel,
    features: &FeatureSpec,
    id: &str,
    grid: &[ModelSpec],
    validation: f64,
    seed: u64,
) -> Result<ModelArtifact> {
    let fm = ml::build_features(panel, features)?;
    let (selected, model) = ml::select_and_fit(grid, &fm.x, &fm.y, validation, seed)?;
    let pred = model.predict(&fm.x)?;
    let mse = pred.iter().zip(&fm.y).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / fm.rows() as f64;
    let metadata = FitMetadata {
        window_start: fm.dates.first().copied(),
        window_end: fm.dates.last().copied(),
        target: Some(features.target.clone()),
        series: features.commodities.clone(),
        log_likelihood: None,
        training_loss: Some(mse),
        converged: None,
        features: Some(features.clone()),
        feature_names: fm.feature_names.clone(),
        selected: Some(selected),
    };
    Ok(ModelArtifact::new(id, ArtifactPayload::Ml(model), metadata))
}

/// Per-row attributions as `row_index,feature,feature_value,shap_value` CSV,
/// and a JSON summary with the base value and global ordering.
pub fn explain_csv(ensemble: &TreeEnsemble, x: &DMatrix<f64>, names: &[String]) -> Result<(String, Value)> {
    if names.len() != x.ncols() {
        return Err(Error::Dimension {
            expected: x.ncols(),
            got: names.len(),
        });
    }
    let ex = shap::explain_rows(ensemble, x)?;
    let mut out = String::from("row_index,feature,feature_value,shap_value\n");
    for (i, e) in ex.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            out.push_str(&format!("{i},{name},{},{}\n", e.feature_values[j], e.attributions[j]));
        }
    }
    let gi = shap::GlobalImportance::from_explanations(&ex)?;
    let ordering: Vec<Value> = gi
        .order
        .iter()
        .map(|&j| json!({ "feature": names[j], "mean_abs_shap": gi.mean_abs[j] }))
        .collect();
    let summary = json!({
        "base_value": ex[0].base_value,
        "rows": ex.len(),
        "max_local_accuracy_gap": ex.iter().map(|e| e.local_accuracy_gap()).fold(0.0, f64::max),
        "importance": ordering,
    });
    Ok((out, summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutcome {
    pub target: String,
    pub model_id: String,
    pub completed: bool,
    pub error: Option<String>,
    pub failed_forecasts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub panel_rows: usize,
    pub outcomes: Vec<ModelOutcome>,
    pub files: Vec<String>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
        fs::write(&path, contents).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
        self.write(rel, &(text + "\n"))
    }
}

fn forecaster(config: &RunConfig, entry: &ModelEntry, target: &str) -> Result<Box<dyn Forecaster>> {
    Ok(match entry {
        ModelEntry::Garch { kind, exogenous } => {
            let mut spec = GarchSpec::new(*kind);
            if *exogenous {
                spec = spec.with_exogenous(config.exogenous.clone());
            }
            Box::new(GarchForecaster::new(spec, target))
        }
        ModelEntry::Bekk => Box::new(BekkForecaster {
            series: config.commodities.clone(),
            target: target.to_string(),
            options: FitOptions::default(),
        }),
        ModelEntry::Ml { .. } => Box::new(MlForecaster {
            id: entry.id(),
            grid: entry.grid()?,
            features: config.feature_spec(target),
            validation_fraction: config.validation_fraction,
            seed: sub_seed(config.seed, &entry.id()),
        }),
    })
}

fn in_sample_artifact(config: &RunConfig, entry: &ModelEntry, panel: &AlignedPanel, target: &str) -> Result<ModelArtifact> {
    match entry {
        ModelEntry::Garch { kind, exogenous } => {
            let mut spec = GarchSpec::new(*kind);
            if *exogenous {
                spec = spec.with_exogenous(config.exogenous.clone());
            }
            fit_garch_artifact(panel, target, &spec)
        }
        ModelEntry::Bekk => fit_bekk_artifact(panel, &config.commodities),
        ModelEntry::Ml { .. } => fit_ml_artifact(
            panel,
            &config.feature_spec(target),
            &entry.id(),
            &entry.grid()?,
            config.validation_fraction,
            sub_seed(config.seed, &entry.id()),
        ),
    }
}

/// Which optional stages a run performs. The backtest always runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub diagnostics: bool,
    pub in_sample_fits: bool,
    pub explain: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        diagnostics: true,
        in_sample_fits: true,
        explain: true,
    };
    pub const BACKTEST_ONLY: Stages = Stages {
        diagnostics: false,
        in_sample_fits: false,
        explain: false,
    };
}

/// Run every stage and write all artifacts into `out_dir`.
pub fn run_pipeline(config: &RunConfig, base_dir: &Path, out_dir: &Path) -> Result<RunManifest> {
    run_stages(config, base_dir, out_dir, Stages::ALL)
}

pub fn run_stages(config: &RunConfig, base_dir: &Path, out_dir: &Path, stages: Stages) -> Result<RunManifest> {
    config.validate()?;
    let panel = load_panel(config, base_dir)?;
    config
        .backtest
        .validate(panel.len())
        .map_err(|e| match e {
            Error::Config { field, message } => config_err(&format!("backtest.{field}"), message),
            other => other,
        })?;
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    ingest::write_panel(&panel, &out_dir.join("panel.csv"), &out_dir.join("panel.manifest.json"))?;
    w.files.push("panel.csv".into());
    w.files.push("panel.manifest.json".into());

    if stages.diagnostics {
        let cols: Vec<String> = config.commodities.iter().chain(&config.exogenous).cloned().collect();
        w.json("diagnostics.json", &diagnose(&panel, &cols, config.diagnostic_lags)?)?;
    }

    let in_sample = panel.slice(0..config.backtest.in_sample_length);
    let mut outcomes = Vec::new();
    let mut reports: Vec<(String, EvaluationReport)> = Vec::new();
    let mut bekk_done = false;
    for target in config.targets() {
        let mut forecasters: Vec<Box<dyn Forecaster>> = Vec::new();
        for entry in &config.models {
            let id = entry.id();
            let artifact = if !stages.in_sample_fits || (matches!(entry, ModelEntry::Bekk) && bekk_done) {
                None
            } else {
                Some(in_sample_artifact(config, entry, &in_sample, &target))
            };
            let mut error = None;
            match artifact {
                Some(Ok(a)) => {
                    let stem = if matches!(entry, ModelEntry::Bekk) {
                        bekk_done = true;
                        "fits/bekk".to_string()
                    } else {
                        format!("fits/{target}__{id}")
                    };
                    w.write(&format!("{stem}.json"), &(a.to_json()? + "\n"))?;
                    match &a.payload {
                        ArtifactPayload::Garch(f) => w.json(&format!("{stem}.summary.json"), &garch_summary(f, config.diagnostic_lags))?,
                        ArtifactPayload::Bekk(f) => w.json(&format!("{stem}.summary.json"), &bekk_summary(f, &config.commodities))?,
                        ArtifactPayload::Ml(_) => {}
                    }
                    if let (true, Some(trees)) = (config.explain && stages.explain, a.tree_ensemble()) {
                        let fm = ml::build_features(&panel, &config.feature_spec(&target))?;
                        let rows: Vec<usize> = config.backtest.forecast_rows().filter_map(|t| fm.row_of(t)).collect();
                        let x = DMatrix::from_fn(rows.len(), fm.x.ncols(), |i, j| fm.x[(rows[i], j)]);
                        let (csv, summary) = explain_csv(trees, &x, &fm.feature_names)?;
                        w.write(&format!("shap/{target}__{id}.csv"), &csv)?;
                        w.json(&format!("shap/{target}__{id}.json"), &summary)?;
                    }
                }
                Some(Err(e)) => error = Some(format!("in-sample fit: {e}")),
                None => {}
            }
            match forecaster(config, entry, &target) {
                Ok(f) => forecasters.push(f),
                Err(e) => error = Some(e.to_string()),
            }
            outcomes.push(ModelOutcome {
                target: target.clone(),
                model_id: id,
                completed: false,
                error,
                failed_forecasts: 0,
            });
        }
        let records = harness::rolling_backtest(&panel, &target, &forecasters, &config.backtest)?;
        harness::write_records(&records, &out_dir.join(format!("records_{target}.csv")))?;
        w.files.push(format!("records_{target}.csv"));
        let report = harness::evaluate(&records, config.scale)?;
        for o in outcomes.iter_mut().filter(|o| o.target == target) {
            if let Some(m) = report.models.iter().find(|m| m.model_id == o.model_id) {
                o.failed_forecasts = m.n_failed;
                o.completed = o.error.is_none() && m.n_failed < m.n_forecasts;
                if m.n_failed == m.n_forecasts && o.error.is_none() {
                    o.error = Some("every out-of-sample forecast failed".into());
                }
            }
        }
        reports.push((target, report));
    }
    let table: ComparisonTable = harness::compare_report(&reports)?;
    let per_target: BTreeMap<&str, &EvaluationReport> = reports.iter().map(|(t, r)| (t.as_str(), r)).collect();
    w.json("report.json", &json!({ "comparison": table, "by_target": per_target }))?;
    w.write("report.csv", &table.to_csv()?)?;
    let mut manifest = RunManifest {
        seed: config.seed,
        panel_rows: panel.len(),
        outcomes,
        files: Vec::new(),
    };
    manifest.files = w.files.clone();
    manifest.files.push("run_manifest.json".into());
    w.json("run_manifest.json", &manifest)?;
    if !manifest.outcomes.iter().any(|o| o.completed) {
        return Err(Error::invalid("no model completed; see run_manifest.json"));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::garch::GarchParams;
    use crate::ml::{BoostParams, TreeParams};

    fn write_prices(dir: &Path, n: usize) -> PathBuf {
        let (a, _) = garch::simulate(GarchKind::Garch, &GarchParams::garch(0.05, 0.08, 0.9), n, 100, 1);
        let (b, _) = garch::simulate(GarchKind::Gjr, &GarchParams::garch(0.05, 0.05, 0.85).with_gamma(0.1), n, 100, 2);
        let d0 = NaiveDate::from_ymd_opt(2005, 1, 3).unwrap();
        let mut text = String::from("date,oil,gas,rate\n");
        let (mut pa, mut pb) = (50.0f64, 3.0f64);
        for i in 0..n {
            pa *= (a[i] / 100.0).exp();
            pb *= (b[i] / 100.0).exp();
            let rate = if i % 5 == 0 { format!("{:.3}", 2.0 + (i as f64 / 50.0).sin()) } else { String::new() };
            text.push_str(&format!("{},{pa:.6},{pb:.6},{rate}\n", d0 + chrono::Days::new(i as u64)));
        }
        let path = dir.join("prices.csv");
        fs::write(&path, text).unwrap();
        path
    }

    fn small_config() -> RunConfig {
        RunConfig::from_json(
            r#"{
            "data": [{"path": "prices.csv"}],
            "transforms": {"oil": "log_return", "gas": "log_return", "rate": "simple_diff"},
            "commodities": ["oil", "gas"],
            "exogenous": ["rate"],
            "targets": ["oil"],
            "models": [
                {"family": "garch", "kind": "garch"},
                {"family": "ml", "model": "boost", "grid": [{"model": "boost", "n_rounds": 20, "learning_rate": 0.1, "max_depth": 2, "lambda_l2": 1.0, "alpha_l1": 0.0, "min_child_weight": 5.0}]},
                {"family": "ml", "model": "ols"}
            ],
            "backtest": {"in_sample_length": 300, "out_of_sample_length": 15, "reestimation_period": 5, "volatility_floor": 0.0},
            "seed": 7
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn sub_seeds_are_stable_and_independent() {
        assert_eq!(sub_seed(7, "forest"), sub_seed(7, "forest"));
        assert_ne!(sub_seed(7, "forest"), sub_seed(7, "boost"));
        assert_ne!(sub_seed(7, "forest"), sub_seed(8, "forest"));
        // reference values of the splitting rule
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }

    #[test]
    fn pipeline_writes_every_artifact_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        write_prices(dir.path(), 340);
        let cfg = small_config();
        let out1 = dir.path().join("run1");
        let out2 = dir.path().join("run2");
        let m = run_pipeline(&cfg, dir.path(), &out1).unwrap();
        run_pipeline(&cfg, dir.path(), &out2).unwrap();
        for f in &m.files {
            assert!(out1.join(f).exists(), "{f}");
        }
        for f in ["panel.csv", "diagnostics.json", "records_oil.csv", "report.json", "shap/oil__boost.csv", "fits/oil__garch.json"] {
            assert!(m.files.iter().any(|x| x == f), "{f}");
        }
        assert_eq!(fs::read(out1.join("report.json")).unwrap(), fs::read(out2.join("report.json")).unwrap());
        assert!(m.outcomes.iter().all(|o| o.completed), "{:?}", m.outcomes);
        let records = fs::read_to_string(out1.join("records_oil.csv")).unwrap();
        assert_eq!(records.lines().count(), 1 + 3 * 15);
    }

    #[test]
    fn missing_column_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        write_prices(dir.path(), 60);
        let mut cfg = small_config();
        cfg.data[0].columns.insert("coal".into(), "coal".into());
        let err = run_pipeline(&cfg, dir.path(), &dir.path().join("out")).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("coal"));
    }

    #[test]
    fn config_validation_names_fields() {
        let base = serde_json::to_value(small_config()).unwrap();
        let with = |f: &dyn Fn(&mut Value)| {
            let mut v = base.clone();
            f(&mut v);
            RunConfig::from_json(&v.to_string())
        };
        let field = |r: Result<RunConfig>| match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        assert_eq!(field(with(&|v| v["commodities"] = json!(["coal"]))), "commodities");
        assert_eq!(field(with(&|v| v["targets"] = json!(["rate"]))), "targets");
        assert_eq!(field(with(&|v| v["lags"] = json!(0))), "lags");
        assert_eq!(field(with(&|v| v["models"] = json!([{"family": "ml", "model": "svm"}]))), "models");
        assert_eq!(field(with(&|v| v["models"] = json!([{"family": "bekk"}, {"family": "bekk"}]))), "models");
        assert_eq!(field(RunConfig::from_json("{\"data\": [")), "config");
        // omitted backtest fields take their defaults
        let partial = with(&|v| v["backtest"] = json!({"in_sample_length": 300, "out_of_sample_length": 15})).unwrap();
        assert_eq!(partial.backtest.reestimation_period, 1);
    }

    #[test]
    fn artifacts_round_trip_exactly() {
        let (r, _) = garch::simulate(GarchKind::Gjr, &GarchParams::garch(0.05, 0.05, 0.85).with_gamma(0.1), 400, 50, 3);
        let d0 = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
        let panel = AlignedPanel::new(
            (0..400).map(|i| d0 + chrono::Days::new(i)).collect(),
            vec![ingest::PanelColumn { name: "oil".into(), values: r.clone(), tag: TransformTag::LogReturn }],
        )
        .unwrap();
        let g = fit_garch_artifact(&panel, "oil", &GarchSpec::new(GarchKind::Gjr)).unwrap();
        let back = ModelArtifact::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let (ArtifactPayload::Garch(a), ArtifactPayload::Garch(b)) = (&g.payload, &back.payload) else { panic!() };
        assert_eq!(
            garch::forecast_one_step(a, 1.3, &[]).unwrap().to_bits(),
            garch::forecast_one_step(b, 1.3, &[]).unwrap().to_bits()
        );

        let spec = FeatureSpec::new("oil", vec!["oil".into()], vec![]).with_lags(3);
        let grid = [ModelSpec::Boost(BoostParams { n_rounds: 15, ..Default::default() })];
        let m = fit_ml_artifact(&panel, &spec, "boost", &grid, 0.0, 1).unwrap();
        let back = ModelArtifact::from_json(&m.to_json().unwrap()).unwrap();
        let fm = ml::build_features(&panel, &spec).unwrap();
        let (t1, t2) = (m.tree_ensemble().unwrap(), back.tree_ensemble().unwrap());
        for i in 0..20 {
            let row: Vec<f64> = fm.x.row(i).iter().copied().collect();
            assert_eq!(t1.predict_row(&row).to_bits(), t2.predict_row(&row).to_bits());
            assert_eq!(shap::tree_shap(t1, &row).unwrap(), shap::tree_shap(t2, &row).unwrap());
        }
        let tree = fit_ml_artifact(&panel, &spec, "tree", &[ModelSpec::Tree(TreeParams::default())], 0.0, 1).unwrap();
        assert!(tree.to_json().unwrap().contains("\"threshold\""));
    }

    #[test]
    fn artifact_version_and_corruption_errors() {
        let art = ModelArtifact::new(
            "ols",
            ArtifactPayload::Ml(ModelSpec::Ols.fit(&DMatrix::from_fn(10, 1, |i, _| i as f64), &[1.0; 10], 0).unwrap()),
            FitMetadata {
                window_start: None,
                window_end: None,
                target: None,
                series: vec![],
                log_likelihood: None,
                training_loss: None,
                converged: None,
                features: None,
                feature_names: vec![],
                selected: None,
            },
        );
        let text = art.to_json().unwrap();
        let bumped = text.replacen("\"version\": 1", "\"version\": 9", 1);
        assert!(matches!(ModelArtifact::from_json(&bumped), Err(Error::Version { found: 9, expected: 1 })));
        let cut = &text[..text.len() / 2];
        match ModelArtifact::from_json(cut) {
            Err(Error::Json { offset, .. }) => assert!(offset > 0 && offset <= cut.len()),
            other => panic!("{other:?}"),
        }
    }
}
