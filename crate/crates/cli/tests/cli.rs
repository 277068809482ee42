use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn sloppyopt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sloppyopt"))
        .args(args)
        .current_dir(dir)
        .env_remove("SLOPPYOPT_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SUMEXP: &str = r#"{"problem": {"model": "sum_of_exponentials", "n": 29}, "budget": 150}"#;

#[test]
fn optimize_echoes_flag_overrides() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "cfg.json", SUMEXP);
    let o = sloppyopt(
        &[
            "optimize",
            "--config",
            "cfg.json",
            "--strategy",
            "stochastic",
            "--k",
            "18",
            "--seed",
            "42",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let r = json(tmp.path().join("out/result.json"));
    assert_eq!(r["strategy"], "stochastic");
    assert_eq!(r["k"], 18);
    assert_eq!(r["seed"], 42);
    assert_eq!(r["theta_final"].as_array().unwrap().len(), 29);
    assert!(r["converged"].is_boolean());
    assert!(r["misalignment_history"].is_array());
    assert!(r["eigenspectrum"].is_array());
    assert!(r["calls"].as_u64().unwrap() <= 150);

    let trace = std::fs::read_to_string(tmp.path().join("out/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("call_index,phase,loss,k1,"));
    assert_eq!(lines.count() as u64, r["calls"].as_u64().unwrap());
}

#[test]
fn optimize_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "cfg.json", SUMEXP);
    let run = |out: &str| {
        let o = sloppyopt(
            &[
                "optimize", "--config", "cfg.json", "--out", out, "--seed", "3",
            ],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(tmp.path().join(out).join("result.json")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn missing_dataset_is_a_config_error_naming_the_path() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "toy_kinetics", "dataset": "nowhere/data.csv"}}"#,
    );
    let o = sloppyopt(&["optimize", "--config", "cfg.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/data.csv"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "quadratic"}, "sede": 1}"#,
    );
    let o = sloppyopt(&["optimize", "--config", "cfg.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
}

#[test]
fn k_with_exact_strategy_is_rejected() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "cfg.json", SUMEXP);
    let o = sloppyopt(
        &["optimize", "--config", "cfg.json", "--k", "5"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulator_failure_exits_3() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "toy_kinetics", "pressures": 3, "temperatures": 3},
            "start": {"kind": "explicit", "theta": [1e9, 1e9, 1e9, 1e9, 1e9, 1e9, 1e9, 1e9]}}"#,
    );
    let o = sloppyopt(&["optimize", "--config", "cfg.json"], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn bad_thread_count_exits_2() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "cfg.json", SUMEXP);
    let o = Command::new(env!("CARGO_BIN_EXE_sloppyopt"))
        .args(["optimize", "--config", "cfg.json"])
        .current_dir(tmp.path())
        .env("SLOPPYOPT_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("SLOPPYOPT_THREADS"));
}

#[test]
fn thread_cap_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "cfg.json", SUMEXP);
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_sloppyopt"))
            .args(["optimize", "--config", "cfg.json", "--out", out])
            .current_dir(tmp.path())
            .env("SLOPPYOPT_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(tmp.path().join(out).join("result.json")).unwrap()
    };
    assert_eq!(run("1", "one"), run("4", "four"));
}

const PLAN: &str = r#"{
    "problem": {"model": "sum_of_exponentials", "n": 8, "samples": 30},
    "optimizers": [
        {"name": "hierarchical", "strategy": "exact"},
        {"name": "nelder_mead"}
    ],
    "budget": 200,
    "seeds": [0, 1]
}"#;

#[test]
fn bench_writes_one_trace_per_run_and_a_summary() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "plan.json", PLAN);
    let o = sloppyopt(
        &["bench", "--config", "plan.json", "--out", "bundle"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let mut files: Vec<String> = std::fs::read_dir(tmp.path().join("bundle"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    let traces = files.iter().filter(|f| f.starts_with("trace_")).count();
    assert_eq!(traces, 4, "{files:?}");
    assert_eq!(files.len(), 5, "{files:?}");
    let summary = json(tmp.path().join("bundle/summary.json"));
    assert_eq!(summary["optimizers"].as_array().unwrap().len(), 2);
}

#[test]
fn bench_seed_sweep_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "plan.json", PLAN);
    for out in ["x", "y"] {
        let o = sloppyopt(
            &["bench", "--config", "plan.json", "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for entry in std::fs::read_dir(tmp.path().join("x")).unwrap() {
        let name = entry.unwrap().file_name();
        let a = std::fs::read(tmp.path().join("x").join(&name)).unwrap();
        let b = std::fs::read(tmp.path().join("y").join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn bench_without_optimizers_exits_2() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "plan.json",
        r#"{"problem": {"model": "quadratic"}, "optimizers": []}"#,
    );
    let o = sloppyopt(&["bench", "--config", "plan.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn spectrum_recovers_prescribed_eigenvalues() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "quadratic", "n": 5, "decades": 1, "seed": 4}, "output_dir": "spec"}"#,
    );
    let o = sloppyopt(&["spectrum", "--config", "cfg.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report = json(tmp.path().join("spec/spectrum.json"));
    let values: Vec<f64> = report["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(values.len(), 5);
    for (i, v) in values.iter().enumerate() {
        let expected = 10f64.powi(-(i as i32));
        assert!((v - expected).abs() <= 1e-6 * expected, "λ{i} = {v}");
    }
    let csv = std::fs::read_to_string(tmp.path().join("spec/spectrum.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    let first = std::fs::read(tmp.path().join("spec/spectrum.json")).unwrap();
    let o = sloppyopt(&["spectrum", "--config", "cfg.json"], tmp.path());
    assert!(o.status.success());
    assert_eq!(
        first,
        std::fs::read(tmp.path().join("spec/spectrum.json")).unwrap()
    );
}

#[test]
fn uncertainty_at_a_previous_result() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "toy_kinetics", "pressures": 5, "temperatures": 5, "noise": 0.05, "data_seed": 2},
            "budget": 400,
            "uncertainty": {"fraction": 0.01}}"#,
    );
    let o = sloppyopt(&["optimize", "--config", "cfg.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let from_optimize = json(tmp.path().join("out/uncertainty.json"));
    assert_eq!(from_optimize["parameters"].as_array().unwrap().len(), 8);

    let o = sloppyopt(
        &[
            "uncertainty",
            "--config",
            "cfg.json",
            "--result",
            "out/result.json",
            "--out",
            "u",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let again = json(tmp.path().join("u/uncertainty.json"));
    assert_eq!(again, from_optimize);
    let loss = again["loss"].as_f64().unwrap();
    let threshold = again["delta_phi_threshold"].as_f64().unwrap();
    assert!((threshold - 0.01 * loss).abs() <= 1e-15 * loss);
    for row in again["parameters"].as_array().unwrap() {
        assert!(row["class"] == "stiff" || row["class"] == "sloppy");
    }
}

#[test]
fn generated_data_round_trips_through_optimize() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "gen.json",
        r#"{"problem": {"model": "sum_of_exponentials", "n": 6, "samples": 20, "noise": 0.01}, "output_dir": "data"}"#,
    );
    let o = sloppyopt(
        &["generate-data", "--config", "gen.json", "--seed", "9"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("data/dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);

    std::fs::create_dir(tmp.path().join("cfgs")).unwrap();
    write(
        &tmp.path().join("cfgs"),
        "fit.json",
        r#"{"problem": {"model": "sum_of_exponentials", "n": 6, "dataset": "../data/dataset.csv"}, "budget": 100}"#,
    );
    let o = sloppyopt(&["optimize", "--config", "cfgs/fit.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn quadratic_has_no_data_to_generate() {
    let tmp = TempDir::new().unwrap();
    write(
        tmp.path(),
        "cfg.json",
        r#"{"problem": {"model": "quadratic"}}"#,
    );
    let o = sloppyopt(&["generate-data", "--config", "cfg.json"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
