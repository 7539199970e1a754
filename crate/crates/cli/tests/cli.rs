use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snapchain"))
        .args(args)
        .output()
        .unwrap()
}

fn run_with(cfg: &str, args: &[&str]) -> Output {
    let path = config(cfg);
    let mut all = vec!["--config", path.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn error_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr should be one JSON object")
}

#[test]
fn plan_example_sequence_is_verified() {
    let o = run_with("pair.json", &["plan", "--sequence", "00,10,11,01,00"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["success"], Value::Bool(true));
    let realized: Vec<&str> = report["realized"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(realized, ["00", "10", "11", "01", "00"]);
}

#[test]
fn three_element_graph_without_stable_intermediates() {
    let dir = tempfile::tempdir().unwrap();
    let el = |fmax: f64, fmin: f64| {
        format!(r#"{{"kind": "trilinear", "eps_max": 4, "f_max": {fmax}, "eps_min": 7, "f_min": {fmin}, "k1": 0.5}}"#)
    };
    let text = format!(
        r#"{{"chain": {{"c": 0.015, "elements": [{}, {}, {}]}}}}"#,
        el(1.8, 0.7),
        el(1.9, 0.6),
        el(2.0, 0.5)
    );
    let path = dir.path().join("three.json");
    fs::write(&path, text).unwrap();
    let o = run(&[
        "--config",
        path.to_str().unwrap(),
        "graph",
        "--format",
        "json",
        "--intermediates",
        "unstable",
    ]);
    assert!(o.status.success());
    let g: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(g["nodes"].as_array().unwrap().len(), 8);
    assert_eq!(g["edges"].as_array().unwrap().len(), 24);

    let dot = stdout(&run(&[
        "--config",
        path.to_str().unwrap(),
        "graph",
        "--intermediates",
        "unstable",
    ]));
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("->").count(), 24);
}

#[test]
fn missing_config_is_reported_as_json() {
    let o = run(&["--config", "/nonexistent/run.json", "critical-rate"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("/nonexistent/run.json"));
}

#[test]
fn usage_errors_exit_with_two() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_json(&o)["error"], "usage");

    let o = run_with("pair.json", &["simulate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    fs::write(
        &path,
        r#"{"chain": {"c": -1, "elements": [{"kind": "trilinear", "eps_max": 4, "f_max": 2, "eps_min": 3, "f_min": 0.5, "k1": 0.5}]}}"#,
    )
    .unwrap();
    let o = run(&["--config", path.to_str().unwrap(), "equilibria", "--length", "5"]);
    assert_eq!(o.status.code(), Some(1));
    let e = error_json(&o);
    assert_eq!(e["error"], "invalid_config");
    let msg = e["message"].as_str().unwrap();
    assert!(msg.contains("damping") || msg.contains("c "), "{msg}");
    assert!(msg.contains(';'), "expected several problems in {msg}");
}

#[test]
fn bad_state_label_is_a_library_error() {
    let o = run_with("pair.json", &["plan", "--sequence", "00,1x"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_json(&o)["error"], "bad_state_label");
}

#[test]
fn csv_headers() {
    let sim = stdout(&run_with(
        "pair.json",
        &["simulate", "--rate", "10", "--duration", "0.1"],
    ));
    assert_eq!(sim.lines().next(), Some("t,eps_1,eps_2,phase_1,phase_2,v,L"));
    let eq = stdout(&run_with("pair.json", &["equilibria", "--length", "10"]));
    assert_eq!(eq.lines().next(), Some("state,eps_1,eps_2,force,L,stability,k_eq"));
    let rates = stdout(&run_with("pair.json", &["critical-rate", "--format", "csv"]));
    let mut lines = rates.lines();
    assert_eq!(lines.next(), Some("method,extend,contract"));
    assert_eq!(lines.count(), 3);
    let sweep = stdout(&run_with(
        "pair.json",
        &["sweep", "--from", "00", "--min", "5", "--max", "30", "--points", "4"],
    ));
    let rows: Vec<&str> = sweep.lines().collect();
    assert_eq!(rows[0], "v,element,from_phase,to_phase");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].ends_with(",1,0,s") && rows[4].ends_with(",2,0,s"));
}

#[test]
fn schedule_file_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let schedule = dir.path().join("schedule.json");
    fs::write(
        &schedule,
        r#"{"segments": [
            {"v": 20, "stop": {"kind": "length", "target": 12}},
            {"v": 0, "stop": {"kind": "settled", "threshold": 0.0001, "timeout": 100}},
            {"v": -20, "stop": {"kind": "duration", "seconds": 0.2}}
        ]}"#,
    )
    .unwrap();
    let out = dir.path().join("run.json");
    let o = run_with(
        "pair.json",
        &[
            "--out",
            out.to_str().unwrap(),
            "simulate",
            "--schedule",
            schedule.to_str().unwrap(),
            "--format",
            "json",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let tr: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let reasons: Vec<&str> = tr["segments"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["reason"].as_str().unwrap())
        .collect();
    assert_eq!(reasons, ["length_reached", "settled", "duration_elapsed"]);
    let length: f64 = tr["final_state"]["eps"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e.as_f64().unwrap())
        .sum();
    assert!((length - 8.0).abs() < 1e-6);
}

#[test]
fn random_sweep_follows_seed() {
    let args = |seed: &'static str| {
        vec![
            "--seed", seed, "sweep", "--from", "00", "--min", "1", "--max", "100", "--random", "6",
        ]
    };
    let a = stdout(&run_with("pair.json", &args("3")));
    let b = stdout(&run_with("pair.json", &args("3")));
    let c = stdout(&run_with("pair.json", &args("4")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 7);
}
