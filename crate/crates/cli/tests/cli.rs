use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chrono::{Days, NaiveDate};
use enervol::garch::{simulate, GarchKind, GarchParams};
use serde_json::Value;

fn enervol(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enervol"))
        .current_dir(dir)
        .env_remove("ENERVOL_OUTPUT_DIR")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap()
}

fn write_prices(dir: &Path, n: usize) {
    let (a, _) = simulate(GarchKind::Garch, &GarchParams::garch(0.05, 0.08, 0.9), n, 100, 11);
    let (b, _) = simulate(GarchKind::Garch, &GarchParams::garch(0.03, 0.06, 0.9), n, 100, 12);
    let mut text = String::from("date,oil,gas\n");
    let (mut pa, mut pb) = (60.0f64, 3.0f64);
    let d0 = NaiveDate::from_ymd_opt(2012, 1, 1).unwrap();
    let day = |i: usize| d0 + Days::new(i as u64);
    for i in 0..n {
        pa *= (a[i] / 100.0).exp();
        pb *= (b[i] / 100.0).exp();
        text.push_str(&format!("{},{pa:.6},{pb:.6}\n", day(i)));
    }
    fs::write(dir.join("prices.csv"), text).unwrap();
    let rates: String = (0..n)
        .step_by(7)
        .map(|i| format!("{},{:.4}\n", day(i), 1.5 + (i as f64 / 40.0).cos()))
        .collect();
    fs::write(dir.join("rates.csv"), format!("date,RATE_10Y\n{rates}")).unwrap();
}

fn write_config(dir: &Path, extra_column: Option<&str>) -> PathBuf {
    let rate_cols = match extra_column {
        Some(c) => format!(r#"{{"RATE_10Y": "rate", "{c}": "{c}"}}"#),
        None => r#"{"RATE_10Y": "rate"}"#.to_string(),
    };
    let cfg = format!(
        r#"{{
  "data": [{{"path": "prices.csv"}}, {{"path": "rates.csv", "columns": {rate_cols}}}],
  "transforms": {{"oil": "log_return", "gas": "log_return", "rate": "simple_diff"}},
  "commodities": ["oil", "gas"],
  "exogenous": ["rate"],
  "targets": ["oil"],
  "models": [
    {{"family": "garch", "kind": "gjr"}},
    {{"family": "garch", "kind": "garch", "exogenous": true}},
    {{"family": "ml", "model": "lasso"}},
    {{"family": "ml", "model": "forest", "grid": [{{"model": "forest", "n_trees": 10, "max_depth": 3, "min_leaf": 10, "feature_fraction": 0.5, "bootstrap": true}}]}}
  ],
  "backtest": {{"in_sample_length": 320, "out_of_sample_length": 12, "reestimation_period": 4, "volatility_floor": 0.0}},
  "seed": 3
}}"#
    );
    let path = dir.join("run.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn run_smoke_produces_every_output() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 360);
    write_config(dir.path(), None);
    let out = enervol(dir.path(), &["run", "--config", "run.json", "-o", "out"]);
    let manifest = stdout_json(&out);
    assert!(manifest["outcomes"].as_array().unwrap().iter().all(|o| o["completed"] == true), "{manifest}");
    for f in manifest["files"].as_array().unwrap() {
        assert!(dir.path().join("out").join(f.as_str().unwrap()).exists(), "{f}");
    }
    let shap = fs::read_to_string(dir.path().join("out/shap/oil__forest.csv")).unwrap();
    assert_eq!(shap.lines().next().unwrap(), "row_index,feature,feature_value,shap_value");
    let records = fs::read_to_string(dir.path().join("out/records_oil.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 4 * 12);
}

#[test]
fn report_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 360);
    write_config(dir.path(), None);
    for out in ["a", "b"] {
        stdout_json(&enervol(dir.path(), &["run", "--config", "run.json", "-o", out]));
    }
    let a = fs::read(dir.path().join("a/report.json")).unwrap();
    let b = fs::read(dir.path().join("b/report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_column_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 60);
    write_config(dir.path(), Some("HENRY_HUB"));
    let out = enervol(dir.path(), &["run", "--config", "run.json", "-o", "out"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("HENRY_HUB"), "{err}");
}

#[test]
fn invalid_config_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 60);
    let path = write_config(dir.path(), None);
    let text = fs::read_to_string(&path).unwrap().replace("\"seed\": 3", "\"seed\": 3, \"lags\": 0");
    fs::write(&path, text).unwrap();
    let out = enervol(dir.path(), &["run", "--config", "run.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("lags"));
}

#[test]
fn single_stage_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 360);
    let p = dir.path();
    stdout_json(&enervol(p, &["ingest", "--data", "prices.csv", "--transform", "oil=log_return", "--transform", "gas=log_return", "-o", "w"]));
    assert!(p.join("w/panel.manifest.json").exists());

    let diag = stdout_json(&enervol(p, &["diagnose", "--panel", "w/panel.csv", "--lags", "10", "-o", "w"]));
    let tests: Vec<&str> = diag.as_array().unwrap().iter().map(|r| r["test"].as_str().unwrap()).collect();
    assert!(tests.len() >= 8, "{tests:?}");

    let g = stdout_json(&enervol(p, &["fit-garch", "--panel", "w/panel.csv", "--target", "oil", "--model", "gjr", "-o", "w"]));
    assert!(g["fit"]["params"]["gamma"].is_number(), "{g}");

    let b = stdout_json(&enervol(p, &["fit-bekk", "--panel", "w/panel.csv", "--series", "oil,gas", "-o", "w"]));
    assert_eq!(b["fit"]["A"].as_array().unwrap().len(), 2);

    let m = stdout_json(&enervol(
        p,
        &["fit-ml", "--panel", "w/panel.csv", "--target", "oil", "--model", "boost", "--commodities", "oil,gas", "--lags", "2", "--n-rounds", "20", "--seed", "5", "-o", "w"],
    ));
    assert_eq!(m["metadata"]["feature_names"].as_array().unwrap().len(), 4);
    assert_eq!(m["metadata"]["selected"]["n_rounds"], 20);

    let e = stdout_json(&enervol(p, &["explain", "--model", "w/fits/oil__boost.json", "--data", "w/panel.csv", "-o", "w"]));
    assert!(e["summary"]["max_local_accuracy_gap"].as_f64().unwrap() < 1e-9);

    let lin = enervol(p, &["explain", "--model", "w/fits/oil__gjr.json", "--data", "w/panel.csv", "-o", "w"]);
    assert_eq!(lin.status.code(), Some(1));
}

#[test]
fn backtest_then_report_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 360);
    write_config(dir.path(), None);
    let p = dir.path();
    stdout_json(&enervol(p, &["backtest", "--config", "run.json", "-o", "bt"]));
    assert!(!p.join("bt/fits").exists());
    let first = fs::read(p.join("bt/report.json")).unwrap();
    stdout_json(&enervol(p, &["report", "--records", "bt/records_oil.csv", "-o", "rep"]));
    let again: Value = serde_json::from_slice(&fs::read(p.join("rep/report.json")).unwrap()).unwrap();
    let first: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(first["comparison"], again["comparison"]);
}

#[test]
fn seed_flag_overrides_config_and_env_sets_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_prices(dir.path(), 360);
    write_config(dir.path(), None);
    let out = Command::new(env!("CARGO_BIN_EXE_enervol"))
        .current_dir(dir.path())
        .env("ENERVOL_OUTPUT_DIR", "from-env")
        .args(["backtest", "--config", "run.json", "--seed", "99"])
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["seed"], 99);
    assert!(dir.path().join("from-env/report.json").exists());
}

#[test]
fn corrupt_artifact_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"version\": 1, \"model_id\": ").unwrap();
    let out = enervol(dir.path(), &["explain", "--model", "bad.json", "--data", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "json");
    assert!(err["message"].as_str().unwrap().contains("offset"));
}
