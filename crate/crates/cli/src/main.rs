use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enervol::garch::{GarchKind, GarchSpec};
use enervol::harness::{self, MetricScale};
use enervol::ingest::{self, AlignedPanel, TransformTag};
use enervol::ml::{BoostParams, FeatureSpec, ForestParams, MlpParams, ModelSpec, TreeParams};
use enervol::pipeline::{self, ArtifactPayload, DataSource, ModelArtifact, ModelEntry, RunConfig, Stages};
use enervol::{Error, Result};
use serde_json::{json, Value};

/// Volatility modelling and forecast evaluation for energy commodity returns.
#[derive(Debug, Parser)]
#[command(name = "enervol", version)]
struct Cli {
    /// Run configuration (JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Falls back to the config, then $ENERVOL_OUTPUT_DIR, then ./enervol-out.
    #[arg(long, short = 'o', global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct PanelArgs {
    /// Transformed panel CSV written by `ingest`; defaults to the config's sources.
    #[arg(long)]
    panel: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align and transform raw CSV sources into a panel.
    Ingest {
        /// Raw CSV file with a `date` column; repeatable.
        #[arg(long)]
        data: Vec<PathBuf>,
        /// Transform for a column as `name=tag`; repeatable.
        #[arg(long, value_parser = parse_transform)]
        transform: Vec<(String, TransformTag)>,
        #[arg(long)]
        asinh_fallback: bool,
    },
    /// Normality, stationarity and ARCH tests on panel columns.
    Diagnose {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_delimiter = ',')]
        series: Vec<String>,
        #[arg(long)]
        lags: Option<usize>,
    },
    /// Fit a univariate GARCH-family model.
    FitGarch {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "garch")]
        model: GarchKind,
        /// Exogenous variance regressors, comma separated.
        #[arg(long, value_delimiter = ',')]
        exog: Vec<String>,
    },
    /// Fit a full BEKK(1,1) model.
    FitBekk {
        #[command(flatten)]
        panel: PanelArgs,
        #[arg(long, value_delimiter = ',')]
        series: Vec<String>,
    },
    /// Fit a regression model on lagged squared returns.
    FitMl(FitMlArgs),
    /// Rolling-window backtest of the configured models.
    Backtest,
    /// TreeSHAP attributions of a fitted tree model.
    Explain {
        /// Model artifact written by `fit-ml` or `run`.
        #[arg(long)]
        model: PathBuf,
        /// Panel CSV to explain; defaults to the config's sources.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Accuracy metrics from forecast record CSVs.
    Report {
        #[arg(long, required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        scale: Option<MetricScale>,
    },
    /// Full run: ingest, diagnostics, fits, backtest, explanations and report.
    Run,
}

#[derive(Debug, Args)]
struct FitMlArgs {
    #[command(flatten)]
    panel: PanelArgs,
    #[arg(long)]
    target: String,
    /// ols, ridge, lasso, enet, tree, forest, boost, knn or mlp.
    #[arg(long)]
    model: String,
    #[arg(long, value_delimiter = ',')]
    commodities: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    exog: Vec<String>,
    #[arg(long)]
    lags: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mix: Option<f64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    n_trees: Option<usize>,
    #[arg(long)]
    feature_fraction: Option<f64>,
    #[arg(long)]
    no_bootstrap: bool,
    #[arg(long)]
    n_rounds: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_l2: Option<f64>,
    #[arg(long)]
    alpha_l1: Option<f64>,
    #[arg(long)]
    min_child_weight: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
}

impl FitMlArgs {
    fn any_hyperparameter(&self) -> bool {
        self.lambda.is_some()
            || self.mix.is_some()
            || self.max_depth.is_some()
            || self.min_leaf.is_some()
            || self.n_trees.is_some()
            || self.feature_fraction.is_some()
            || self.no_bootstrap
            || self.n_rounds.is_some()
            || self.learning_rate.is_some()
            || self.lambda_l2.is_some()
            || self.alpha_l1.is_some()
            || self.min_child_weight.is_some()
            || self.k.is_some()
            || self.hidden_width.is_some()
            || self.epochs.is_some()
            || self.step_size.is_some()
    }

    /// The model's default spec with any flags applied on top.
    fn spec(&self) -> Result<ModelSpec> {
        let mut spec = ModelSpec::default_for(&self.model)?;
        match &mut spec {
            ModelSpec::Ols => {}
            ModelSpec::Ridge { lambda } | ModelSpec::Lasso { lambda } => set(lambda, self.lambda),
            ModelSpec::Enet { lambda, mix } => {
                set(lambda, self.lambda);
                set(mix, self.mix);
            }
            ModelSpec::Tree(TreeParams { max_depth, min_leaf }) => {
                set(max_depth, self.max_depth);
                set(min_leaf, self.min_leaf);
            }
            ModelSpec::Forest(ForestParams {
                n_trees,
                max_depth,
                min_leaf,
                feature_fraction,
                bootstrap,
            }) => {
                set(n_trees, self.n_trees);
                set(max_depth, self.max_depth);
                set(min_leaf, self.min_leaf);
                set(feature_fraction, self.feature_fraction);
                *bootstrap &= !self.no_bootstrap;
            }
            ModelSpec::Boost(BoostParams {
                n_rounds,
                learning_rate,
                max_depth,
                lambda_l2,
                alpha_l1,
                min_child_weight,
            }) => {
                set(n_rounds, self.n_rounds);
                set(learning_rate, self.learning_rate);
                if self.max_depth.is_some() {
                    *max_depth = self.max_depth;
                }
                set(lambda_l2, self.lambda_l2);
                set(alpha_l1, self.alpha_l1);
                set(min_child_weight, self.min_child_weight);
            }
            ModelSpec::Knn { k } => set(k, self.k),
            ModelSpec::Mlp(MlpParams {
                hidden_width,
                epochs,
                step_size,
            }) => {
                set(hidden_width, self.hidden_width);
                set(epochs, self.epochs);
                set(step_size, self.step_size);
            }
        }
        Ok(spec)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_transform(s: &str) -> std::result::Result<(String, TransformTag), String> {
    let (name, tag) = s.split_once('=').ok_or_else(|| format!("expected name=tag, got '{s}'"))?;
    Ok((name.to_string(), tag.parse().map_err(|e: Error| e.to_string())?))
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Loaded configuration plus the directory its relative paths resolve against.
/// Parsed without validation so single-stage commands can use partial files.
struct Context {
    config: Option<RunConfig>,
    base_dir: PathBuf,
    out_dir: PathBuf,
    seed: u64,
}

impl Context {
    fn new(cli: &Cli, validate: bool) -> Result<Self> {
        let (config, base_dir) = match &cli.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                let cfg = if validate {
                    RunConfig::from_json(&text)?
                } else {
                    serde_json::from_str(&text).map_err(|e| {
                        let offset = Error::from_json(e, &text);
                        config_err("config", offset.to_string())
                    })?
                };
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (Some(cfg), base)
            }
            None => (None, PathBuf::from(".")),
        };
        let out_dir = match &config {
            Some(c) => c.resolve_output_dir(cli.output_dir.as_deref()),
            None => cli
                .output_dir
                .clone()
                .or_else(|| std::env::var_os(pipeline::OUTPUT_DIR_ENV).map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from(pipeline::DEFAULT_OUTPUT_DIR)),
        };
        // a relative output_dir inside the config resolves next to the config file
        let out_dir = match (&config, &cli.output_dir) {
            (Some(c), None) if c.output_dir.is_some() && out_dir.is_relative() => base_dir.join(out_dir),
            _ => out_dir,
        };
        let seed = cli.seed.or(config.as_ref().map(|c| c.seed)).unwrap_or(0);
        Ok(Context {
            config,
            base_dir,
            out_dir,
            seed,
        })
    }

    fn require_config(&self, command: &str) -> Result<&RunConfig> {
        self.config
            .as_ref()
            .ok_or_else(|| config_err("--config", format!("`{command}` needs a run configuration")))
    }

    fn panel(&self, explicit: Option<&Path>) -> Result<AlignedPanel> {
        match explicit {
            Some(path) => {
                let manifest = path.with_extension("manifest.json");
                ingest::read_panel(path, manifest.exists().then_some(manifest.as_path()))
            }
            None => {
                let cfg = self.config.as_ref().ok_or_else(|| {
                    config_err("--panel", "give a panel CSV or a configuration with data sources")
                })?;
                pipeline::ingest_sources(&cfg.data, &cfg.transforms, cfg.asinh_fallback, &self.base_dir)
            }
        }
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    fn write_json(&self, rel: &str, value: &Value) -> Result<PathBuf> {
        self.write(rel, &(pretty(value) + "\n"))
    }
}

fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json values serialize")
}

fn to_value(v: impl serde::Serialize) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn execute(cli: &Cli) -> Result<Value> {
    let validate = matches!(cli.command, Command::Backtest | Command::Run);
    let ctx = Context::new(cli, validate)?;
    match &cli.command {
        Command::Ingest {
            data,
            transform,
            asinh_fallback,
        } => {
            let panel = if data.is_empty() {
                ctx.panel(None)?
            } else {
                if transform.is_empty() {
                    return Err(config_err("--transform", "give at least one name=tag transform"));
                }
                let sources: Vec<DataSource> = data
                    .iter()
                    .map(|p| DataSource {
                        path: p.clone(),
                        columns: BTreeMap::new(),
                    })
                    .collect();
                let tags: BTreeMap<String, TransformTag> = transform.iter().cloned().collect();
                pipeline::ingest_sources(&sources, &tags, *asinh_fallback, Path::new("."))?
            };
            fs::create_dir_all(&ctx.out_dir).map_err(|e| io_err(&ctx.out_dir, e))?;
            let csv = ctx.out_dir.join("panel.csv");
            ingest::write_panel(&panel, &csv, &ctx.out_dir.join("panel.manifest.json"))?;
            Ok(json!({ "panel": csv, "manifest": panel.manifest() }))
        }
        Command::Diagnose { panel, series, lags } => {
            let p = ctx.panel(panel.panel.as_deref())?;
            let cols: Vec<String> = if !series.is_empty() {
                series.clone()
            } else if let Some(c) = &ctx.config {
                c.commodities.iter().chain(&c.exogenous).cloned().collect()
            } else {
                p.names().into_iter().map(String::from).collect()
            };
            let lags = lags.or(ctx.config.as_ref().map(|c| c.diagnostic_lags)).unwrap_or(40);
            let rows = to_value(pipeline::diagnose(&p, &cols, lags)?);
            ctx.write_json("diagnostics.json", &rows)?;
            Ok(rows)
        }
        Command::FitGarch {
            panel,
            target,
            model,
            exog,
        } => {
            let p = ctx.panel(panel.panel.as_deref())?;
            let mut spec = GarchSpec::new(*model);
            if !exog.is_empty() {
                spec = spec.with_exogenous(exog.clone());
            }
            let art = pipeline::fit_garch_artifact(&p, target, &spec)?;
            let ArtifactPayload::Garch(fit) = &art.payload else {
                unreachable!("garch artifact")
            };
            let summary = pipeline::garch_summary(fit, 40);
            let stem = format!("fits/{target}__{}", art.model_id);
            let path = ctx.write(&format!("{stem}.json"), &(art.to_json()? + "\n"))?;
            ctx.write_json(&format!("{stem}.summary.json"), &summary)?;
            Ok(json!({ "artifact": path, "fit": summary }))
        }
        Command::FitBekk { panel, series } => {
            let p = ctx.panel(panel.panel.as_deref())?;
            let series = if series.is_empty() {
                ctx.require_config("fit-bekk without --series")?.commodities.clone()
            } else {
                series.clone()
            };
            let art = pipeline::fit_bekk_artifact(&p, &series)?;
            let ArtifactPayload::Bekk(fit) = &art.payload else {
                unreachable!("bekk artifact")
            };
            let summary = pipeline::bekk_summary(fit, &series);
            let path = ctx.write("fits/bekk.json", &(art.to_json()? + "\n"))?;
            ctx.write_json("fits/bekk.summary.json", &summary)?;
            Ok(json!({ "artifact": path, "fit": summary }))
        }
        Command::FitMl(args) => fit_ml(&ctx, args),
        Command::Backtest => {
            let mut cfg = ctx.require_config("backtest")?.clone();
            cfg.seed = ctx.seed;
            let m = pipeline::run_stages(&cfg, &ctx.base_dir, &ctx.out_dir, Stages::BACKTEST_ONLY)?;
            Ok(to_value(m))
        }
        Command::Explain { model, data } => {
            let art = ModelArtifact::load(model)?;
            let trees = art
                .tree_ensemble()
                .ok_or_else(|| Error::InvalidInput(format!("model '{}' is not a tree model", art.model_id)))?;
            let spec = art
                .metadata
                .features
                .clone()
                .ok_or_else(|| Error::InvalidInput("artifact carries no feature layout".into()))?;
            let p = ctx.panel(data.as_deref())?;
            let fm = enervol::ml::build_features(&p, &spec)?;
            let (csv, summary) = pipeline::explain_csv(trees, &fm.x, &fm.feature_names)?;
            let stem = format!("shap/{}__{}", spec.target, art.model_id);
            let path = ctx.write(&format!("{stem}.csv"), &csv)?;
            ctx.write_json(&format!("{stem}.json"), &summary)?;
            Ok(json!({ "attributions": path, "summary": summary }))
        }
        Command::Report { records, scale } => {
            let scale = scale.or(ctx.config.as_ref().map(|c| c.scale)).unwrap_or_default();
            let mut reports = Vec::new();
            for path in records {
                let label = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(|s| s.strip_prefix("records_").unwrap_or(s).to_string())
                    .unwrap_or_default();
                reports.push((label, harness::evaluate(&harness::read_records(path)?, scale)?));
            }
            let table = harness::compare_report(&reports)?;
            let by_target: BTreeMap<&str, _> = reports.iter().map(|(t, r)| (t.as_str(), r)).collect();
            let doc = json!({ "comparison": table, "by_target": by_target });
            ctx.write_json("report.json", &doc)?;
            ctx.write("report.csv", &table.to_csv()?)?;
            Ok(doc)
        }
        Command::Run => {
            let mut cfg = ctx.require_config("run")?.clone();
            cfg.seed = ctx.seed;
            Ok(to_value(pipeline::run_pipeline(&cfg, &ctx.base_dir, &ctx.out_dir)?))
        }
    }
}

fn fit_ml(ctx: &Context, args: &FitMlArgs) -> Result<Value> {
    let p = ctx.panel(args.panel.panel.as_deref())?;
    let cfg = ctx.config.as_ref();
    let commodities = if !args.commodities.is_empty() {
        args.commodities.clone()
    } else {
        cfg.map(|c| c.commodities.clone())
            .filter(|c| !c.is_empty())
            .unwrap_or_else(|| vec![args.target.clone()])
    };
    let exog = if !args.exog.is_empty() {
        args.exog.clone()
    } else {
        cfg.map(|c| c.exogenous.clone()).unwrap_or_default()
    };
    let lags = args.lags.or(cfg.map(|c| c.lags)).unwrap_or(1);
    let validation = args.validation_fraction.or(cfg.map(|c| c.validation_fraction)).unwrap_or(0.2);
    // explicit flags pin one spec; otherwise the configured or built-in grid is searched
    let grid = if args.any_hyperparameter() {
        vec![args.spec()?]
    } else {
        let configured = cfg.and_then(|c| {
            c.models.iter().find_map(|m| match m {
                ModelEntry::Ml { model, grid: Some(g) } if *model == args.model && !g.is_empty() => Some(g.clone()),
                _ => None,
            })
        });
        match configured {
            Some(g) => g,
            None => ModelSpec::default_grid(&args.model)?,
        }
    };
    let features = FeatureSpec::new(args.target.clone(), commodities, exog).with_lags(lags);
    let seed = pipeline::sub_seed(ctx.seed, &args.model);
    let art = pipeline::fit_ml_artifact(&p, &features, &args.model, &grid, validation, seed)?;
    let path = ctx.write(&format!("fits/{}__{}.json", args.target, args.model), &(art.to_json()? + "\n"))?;
    Ok(json!({ "artifact": path, "metadata": art.metadata }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(out) => {
            println!("{}", pretty(&out));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.code(), "message": e.to_string() }));
            if matches!(e, Error::Config { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
