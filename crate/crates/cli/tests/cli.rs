use std::path::Path;
use std::process::{Command, Output};

use chrono::NaiveDate;
use nalgebra::DMatrix;
use robust_poet::backtest::synthetic_panel;
use robust_poet::harness::{ExperimentConfig, Metric};
use robust_poet::{FactorCount, PipelineSpec, Scenario, ScenarioSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robust-poet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let known = FactorCount::Known { m: 3 };
    let cfg = ExperimentConfig {
        scenario: ScenarioSpec::standard(Scenario::II, 40, 20, 3),
        pipelines: vec![PipelineSpec::sample(known), PipelineSpec::poet_ss(known)],
        reps: 4,
        metrics: vec![Metric::ScatterMax, Metric::EigenvalueRatio],
        seed: 11,
    };
    let path = dir.join("sim.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn simulate_writes_csv_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");
    for (out, threads) in [(&out_a, "1"), (&out_b, "3")] {
        let o = run(&[
            "--threads", threads, "simulate", "--config", cfg.to_str().unwrap(),
            "--format", "csv", "--out", out.to_str().unwrap(), "--reps", "3",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read_to_string(&out_a).unwrap();
    assert_eq!(a, std::fs::read_to_string(&out_b).unwrap());
    assert!(a.starts_with("pipeline,metric,mean,sd,failures\n"));
    assert_eq!(a.lines().count(), 5);
}

#[test]
fn simulate_dump_matches_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let dump = dir.path().join("reps.json");
    let o = run(&[
        "simulate", "--config", cfg.to_str().unwrap(), "--format", "json",
        "--dump", dump.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let table: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let reps: Vec<serde_json::Value> =
        serde_json::from_str(&std::fs::read_to_string(&dump).unwrap()).unwrap();
    assert_eq!(reps.len(), 4 * 2 * 2);
    for row in table["rows"].as_array().unwrap() {
        let values: Vec<f64> = reps
            .iter()
            .filter(|r| r["pipeline"] == row["pipeline"] && r["metric"] == row["metric"])
            .filter_map(|r| r["value"].as_f64())
            .collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!((mean - row["mean"].as_f64().unwrap()).abs() < 1e-12);
    }
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["simulate", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"scenario\": 1}").unwrap();
    assert_eq!(run(&["simulate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = small_config(dir.path());
    let o = run(&["simulate", "--config", cfg.to_str().unwrap(), "--reps", "0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reps"));

    assert_eq!(run(&["simulate", "--config", cfg.to_str().unwrap(), "--format", "xml"]).status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--config", small_config(dir.path()).to_str().unwrap(), "--out", "/nonexistent/dir/out.csv"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn templates_parse_back() {
    for kind in ["simulate", "factors", "backtest"] {
        let o = run(&["template", kind]);
        assert!(o.status.success());
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(!v.is_null());
    }
    let o = run(&["template", "simulate"]);
    let cfg: ExperimentConfig = serde_json::from_slice(&o.stdout).unwrap();
    cfg.validate().unwrap();
}

#[test]
fn factors_csv_output() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("factors.json");
    let cfg = serde_json::json!({
        "scenario": ScenarioSpec::standard(Scenario::I, 60, 30, 2),
        "d_grid": [20, 30],
        "reps": 3,
        "seed": 5
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    let o = run(&["factors", "--config", path.to_str().unwrap(), "--format", "csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    // Header plus two methods for each of two dimensions.
    assert_eq!(text.lines().count(), 5, "{text}");
}

fn write_panel(path: &Path, d: usize, t: usize, blank: bool) {
    let sigma = DMatrix::from_fn(d, d, |i, j| if i == j { 1e-4 * (1.0 + i as f64) } else { 2e-5 });
    let panel = synthetic_panel(&sigma, t, 9, NaiveDate::from_ymd_opt(2010, 1, 4).unwrap()).unwrap();
    let mut w = String::from("date");
    for tk in &panel.tickers {
        w.push(',');
        w.push_str(tk);
    }
    w.push('\n');
    for (i, date) in panel.dates.iter().enumerate() {
        w.push_str(&date.format("%Y-%m-%d").to_string());
        for j in 0..d {
            if blank && i == 5 && j == 0 {
                w.push(',');
            } else {
                w.push_str(&format!(",{}", panel.returns[(i, j)]));
            }
        }
        w.push('\n');
    }
    std::fs::write(path, w).unwrap();
}

#[test]
fn backtest_writes_risk_table_and_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("returns.csv");
    write_panel(&data, 6, 400, true);
    let pipelines = dir.path().join("strategies.json");
    let strategies = serde_json::json!([
        {"type": "pipeline", "name": "POET-SS", "scatter_kind": "spatial_sign",
         "poet": {"rule": {"rule": "hard"}, "c": 0.5, "cross_validate": false, "repair": true},
         "factor_count": {"type": "known", "m": 1}}
    ]);
    std::fs::write(&pipelines, strategies.to_string()).unwrap();
    let out = dir.path().join("risk.csv");
    let o = run(&[
        "backtest", "--data", data.to_str().unwrap(), "--window", "6",
        "--pipelines", pipelines.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("A000"));
    let risk = std::fs::read_to_string(&out).unwrap();
    assert!(risk.starts_with("year,pipeline,annualized_risk\n"));
    assert!(risk.contains(",EW,") && risk.contains(",POET-SS,"));
    let weights: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("risk.csv.weights.json")).unwrap(),
    )
    .unwrap();
    assert!(!weights.is_empty());
    for rec in &weights {
        let w: Vec<f64> = serde_json::from_value(rec["weights"].clone()).unwrap();
        assert_eq!(w.len(), 5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }
}

#[test]
fn backtest_rejects_bad_dates() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "date,A,B\n2020-01-02,0.1,0.2\nyesterday,0.1,0.2\n").unwrap();
    let o = run(&["backtest", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row"));
}
