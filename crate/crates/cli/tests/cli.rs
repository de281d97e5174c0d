use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn sexalloc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sexalloc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli-tests");
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stderr_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("stderr is JSON: {}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn simulate_is_deterministic() {
    let args = ["simulate", "--C", "50", "--lambda", "10", "--p", "0.1", "--psi", "0.3", "--model", "mult", "--d", "0.1", "--seed", "7"];
    let a = sexalloc(&args);
    let b = sexalloc(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let text = String::from_utf8(a.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "N,M,n,m,deaths");
    assert_eq!(lines.len(), 51);
    let c = sexalloc(&[&args[..args.len() - 1], &["8"]].concat());
    assert_ne!(c.stdout, text.as_bytes());
}

#[test]
fn analyze_writes_versioned_report() {
    let data = tmp("primary.csv");
    let sim = sexalloc(&["simulate", "--C", "20", "--lambda", "8", "--p", "0.2", "--seed", "3", "--mode", "primary", "--out", data.to_str().unwrap()]);
    assert!(sim.status.success());
    let report = tmp("primary.json");
    let out = sexalloc(&[
        "analyze",
        data.to_str().unwrap(),
        "--mode",
        "primary",
        "--model",
        "binomial,mult",
        "--iterations",
        "2000",
        "--burn-in",
        "200",
        "--thin",
        "2",
        "--seed",
        "11",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["schema_version"], "1.0.0");
    assert_eq!(v["tool"]["name"], "sexalloc");
    assert!(v["tool"]["version"].is_string());
    assert_eq!(v["config"]["mcmc"]["seed"], 11);
    assert_eq!(v["config"]["mcmc"]["iterations"], 2000);
    assert_eq!(v["config"]["mcmc"]["burn_in"], 200);
    assert_eq!(v["config"]["mcmc"]["thin"], 2);
    assert_eq!(v["config"]["priors"]["sigma_psi"], 1.0);
    assert_eq!(v["dataset"]["clutches"], 20);
    assert_eq!(v["fits"].as_array().unwrap().len(), 2);
    let probs: f64 = v["model_probabilities"].as_array().unwrap().iter().map(|p| p["posterior"].as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-9);
    assert!(v["classical"].is_object());
}

#[test]
fn secondary_analysis_needs_priors() {
    let data = tmp("secondary.csv");
    std::fs::write(&data, "n,m\n5,1\n7,2\n3,0\n").unwrap();
    let out = sexalloc(&["analyze", data.to_str().unwrap(), "--iterations", "2000"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["exit_code"], 2);
}

#[test]
fn bad_rows_report_the_row() {
    let data = tmp("bad.csv");
    std::fs::write(&data, "N,M\n5,1\n4,6\n").unwrap();
    let out = sexalloc(&["analyze", data.to_str().unwrap(), "--mode", "primary", "--iterations", "2000"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "input");
    assert_eq!(err["error"]["row"], 2);
}

#[test]
fn missing_file_and_bad_flags_exit_2() {
    let out = sexalloc(&["analyze", "/nonexistent/data.csv", "--mode", "primary"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sexalloc(&["analyze", "x.csv", "--model", "poisson"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sexalloc(&["analyze", "x.csv", "--lambda-prior", "12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn power_grid_csv() {
    let out = sexalloc(&["power", "--clutches", "50,100", "--mortality", "0.1,0.5", "--reps", "200", "--seed", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let headers = rdr.headers().unwrap().clone();
    assert!(headers.iter().any(|h| h == "power"));
    let rows: Vec<_> = rdr.records().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows.len(), 4);
}
