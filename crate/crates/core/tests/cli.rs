use std::fs;
use std::path::Path;
use std::process::Command;

use djet_core::mollifier::MollifierOutput;
use serde_json::Value;

fn djet(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_djet"))
        .args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn cantor_example_is_a_dsolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(djet(&["example", "cantor", "--out", &out]), 0);
    let r = report(dir.path());
    assert_eq!(r["exit_code"], 0);
    assert_eq!(r["residual"]["passed"], true);
    assert!(dir.path().join("residual.csv").is_file());
    let prov = &r["provenance"];
    assert_eq!(prov["tool"], "djet");
    assert_eq!(prov["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(prov["command"], "check-dsolution");
    assert_eq!(prov["config"]["input"], "cantor-function");
    assert_eq!(prov["config"]["out"], out.as_str());
}

#[test]
fn sin_fails_the_eikonal_equation_almost_everywhere() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(djet(&["example", "sin-eikonal", "--out", &out_arg(dir.path())]), 4);
    let r = report(dir.path());
    let offending = r["residual"]["offending_measure"].as_f64().unwrap();
    let total = r["residual"]["domain_measure"].as_f64().unwrap();
    // |pi cos(pi x)| = 1 only at two points
    assert!(offending >= 0.9 * total, "{offending}");
}

#[test]
fn outputs_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let cfg = write_config(dir.path(), "cells=2187\ninput=quadratic\nnu_max=4\n");
    let args = ["approximate", "--config", &cfg, "--out", &out, "--seed", "11"];
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let code = djet(&args);
        assert!(code == 0 || code == 4, "exit {code}");
        let files: Vec<Vec<u8>> = ["report.json", "residual.csv", "traces.csv"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        snapshots.push(files);
    }
    assert_eq!(snapshots[0], snapshots[1]);

    let mollify = ["mollify", "--input", "sin", "--config", &cfg, "--out", &out, "--lr", "2"];
    assert_eq!(djet(&mollify), 0);
    let first = fs::read(dir.path().join("mollifier.json")).unwrap();
    assert_eq!(djet(&mollify), 0);
    assert_eq!(first, fs::read(dir.path().join("mollifier.json")).unwrap());
}

#[test]
fn smooth_example_writes_a_verified_mollifier() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(djet(&["example", "smooth", "--out", &out_arg(dir.path()), "--eps", "0.05"]), 0);
    let r = report(dir.path());
    assert_eq!(r["bounds"]["verified"], true);
    assert!(r["derivative_spot_check"]["max_relative_gap"].as_f64().unwrap() < 1e-3);
    let text = fs::read_to_string(dir.path().join("mollifier.json")).unwrap();
    let out = MollifierOutput::from_json(&text).unwrap();
    assert_eq!(out.eps, 0.05);
    assert!(out.bounds.measure_e <= 0.05);
    assert_eq!(r["provenance"]["config"]["eps"], "0.05");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "# quick run\ncells = 729\ninput = constant\nrho_tol = 0.05\n");
    let out = out_arg(dir.path());
    assert_eq!(djet(&["diffuse-jet", "--config", &cfg, "--input", "quadratic", "--out", &out]), 0);
    let r = report(dir.path());
    let c = &r["provenance"]["config"];
    assert_eq!(c["cells"], "729");
    assert_eq!(c["rho_tol"], "0.05");
    // flags win over the file
    assert_eq!(c["input"], "quadratic");
    assert!(dir.path().join("estimate.csv").is_file());
    assert!(dir.path().join("trace.json").is_file());
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(djet(&["check-dsolution", "--input", "no-such-input", "--out", &out]), 2);
    assert_eq!(djet(&["check-dsolution", "--system", "no-such-system", "--out", &out]), 2);
    assert_eq!(djet(&["check-dsolution", "--p", "2", "--out", &out]), 2);
    assert_eq!(djet(&["mollify", "--eps", "-1", "--out", &out]), 2);
    let bad = write_config(dir.path(), "colour=red\n");
    assert_eq!(djet(&["mollify", "--config", &bad, "--out", &out]), 2);
    assert_eq!(djet(&["no-such-command"]), 2);
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn unconverged_estimates_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let cfg = write_config(dir.path(), "cells=729\ninput=cantor-function\nrho_tol=1e-9\n");
    assert_eq!(djet(&["diffuse-jet", "--config", &cfg, "--out", &out]), 3);
    assert_eq!(report(dir.path())["exit_code"], 3);
    assert_eq!(djet(&["check-dsolution", "--config", &cfg, "--out", &out]), 3);
    let lenient = write_config(dir.path(), "cells=729\ninput=cantor-function\nrho_tol=1e-9\nallow_unconverged=true\n");
    let code = djet(&["check-dsolution", "--config", &lenient, "--out", &out]);
    assert_ne!(code, 3);
    assert!(report(dir.path())["residual"]["warning"].is_string());
}

#[test]
fn fat_cantor_example_runs_the_approximation() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(djet(&["example", "fat-cantor", "--out", &out_arg(dir.path())]), 0);
    let r = report(dir.path());
    let steps = r["run"]["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 6);
    for s in steps {
        for key in ["bounds", "rho_to_estimate", "residual_sup_offE", "mode_weighted", "mode_ball", "mode_measure"] {
            assert!(!s[key].is_null(), "missing {key}");
        }
    }
    let traces = fs::read_to_string(dir.path().join("traces.csv")).unwrap();
    assert_eq!(traces.lines().count(), 7);
}
