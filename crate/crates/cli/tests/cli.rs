use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{"estimation":{"paths":3,"max_iter":8},"observations":{"count":10,"samples":4}}"#;

fn slowfast(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .args(args)
        .current_dir(dir)
        .env_remove("SLOWFAST_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is one JSON object")
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), SMALL).unwrap();
    dir
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = setup();
    let out = slowfast(dir.path(), &["simulate", "--epsilon", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = error_json(&out);
    assert_eq!(err["error"], "config");
    assert_eq!(err["exit_code"], 2);
    assert!(err["message"].as_str().unwrap().contains("model.epsilon"));

    fs::write(dir.path().join("bad.json"), r#"{"model":{"a_tru":1}}"#).unwrap();
    let out = slowfast(dir.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("model.a_tru"));
}

#[test]
fn stiff_step_names_the_guard() {
    let dir = setup();
    let out = slowfast(dir.path(), &["simulate", "--epsilon", "0.005"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["message"].as_str().unwrap().contains("stiffness"));
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = setup();
    let out = slowfast(dir.path(), &["simulate", "--config", "absent.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "io");
}

#[test]
fn generate_obs_is_byte_identical_across_runs() {
    let dir = setup();
    for out in ["a", "b"] {
        let res = slowfast(dir.path(), &["generate-obs", "--config", "run.json", "--out-dir", out]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    for name in ["observations.json", "observations.csv"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs");
    }
}

#[test]
fn estimate_reads_generated_observation_files() {
    let dir = setup();
    assert!(slowfast(dir.path(), &["generate-obs", "--config", "run.json", "--out-dir", "obs", "--seed", "3"])
        .status
        .success());
    let cfg = r#"{"estimation":{"paths":3,"max_iter":8},"observations":{"file":"obs/observations.json"}}"#;
    fs::write(dir.path().join("from_file.json"), cfg).unwrap();
    let out = slowfast(dir.path(), &["estimate", "--config", "from_file.json", "--out-dir", "est"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("est/estimate_full.json")).unwrap()).unwrap();
    assert_eq!(result["config"]["observation_seed"], 3);
    let trace = fs::read_to_string(dir.path().join("est/estimate_full_trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iter,best_a,best_objective"));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_slowfast"))
        .args(["manifold-eval", "--config", "run.json"])
        .current_dir(dir.path())
        .env("SLOWFAST_OUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("from_env/manifold.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("xi,h_value"));
    assert_eq!(csv.lines().count(), 202);
}

#[test]
fn emit_manifold_adds_fast_column() {
    let dir = setup();
    let run = |extra: &[&str], out: &str| {
        let mut args = vec!["simulate", "--system", "slow", "--config", "run.json", "--out-dir", out];
        args.extend_from_slice(extra);
        assert!(slowfast(dir.path(), &args).status.success());
        fs::read_to_string(dir.path().join(out).join("trajectory_slow.csv")).unwrap()
    };
    assert_eq!(run(&[], "plain").lines().next(), Some("t,x_1"));
    assert_eq!(run(&["--emit-manifold"], "emit").lines().next(), Some("t,x_1,y_1"));
}

#[test]
fn stdout_lists_written_files() {
    let dir = setup();
    let out = slowfast(dir.path(), &["diagnose-absorbing", "--config", "run.json", "--out-dir", "abs"]);
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["command"], "diagnose-absorbing");
    assert_eq!(summary["files"][0], "absorbing.json");
    assert_eq!(summary["summary"]["violations"], 0);
}
