use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use svph_core::{ExperimentConfig, FourierTable, MapSpec, Observable};

fn svph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svph")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap()
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, v: &T) -> String {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn spectrum_of_the_mixing_preset() {
    let o = svph(&["spectrum", "--preset", "doubling_skew", "--K", "6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&o);
    assert_eq!(v["K"], 6);
    assert_eq!(v["peripheral_count"], 1);
    let lead = &v["eigenvalues"][0];
    assert!((lead[0].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(v["mass_row_error"].as_f64().unwrap() < 1e-9);
}

#[test]
fn map_and_observable_files_match_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let map = write_json(dir.path(), "map.json", &MapSpec::skew_linear(2, FourierTable::cos(0.1, 1, 0)).unwrap());
    let obs = write_json(dir.path(), "obs.json", &Observable::new(FourierTable::cos(1.0, 1, 0)));
    let from_files = svph(&["spectrum", "--config", &map, "--obs", &obs, "--K", "6"]);
    let from_preset = svph(&["spectrum", "--preset", "doubling_skew", "--K", "6"]);
    assert_eq!(code(&from_files), 0);
    assert_eq!(json(&from_files)["eigenvalues"], json(&from_preset)["eigenvalues"]);
}

#[test]
fn check_reports_the_audit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("check.json");
    let o = svph(&["check", "--preset", "doubling_skew", "--samples", "8", "--grid", "32", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert!(v.get("audit").is_some());
    assert!(v.get("cones").is_some());
}

#[test]
fn clt_csv_has_the_long_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clt.csv");
    let o = svph(&[
        "clt", "--preset", "doubling_skew", "--N", "2000", "--n", "16,64", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "n,KS,KS_stderr,variance_ratio,k,sigma,c");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("16,"));
    assert!(rows[1].starts_with("64,"));
}

#[test]
fn llt_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("llt.csv");
    let o = svph(&[
        "llt", "--preset", "doubling_skew", "--N", "2000", "--n", "64", "--z", "-1,0,1", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n,width,z,lhs,rhs,stderr,within_3se");
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn validation_failures_exit_2() {
    assert_eq!(code(&svph(&["spectrum"])), 2);
    assert_eq!(code(&svph(&["spectrum", "--preset", "nope"])), 2);
    assert_eq!(code(&svph(&["spectrum", "--preset", "doubling_skew", "--K", "x"])), 2);
    assert_eq!(code(&svph(&["diffusion", "--preset", "doubling_skew", "--J", "500"])), 2);
    assert_eq!(code(&svph(&["frobnicate"])), 2);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad_map.json");
    fs::write(&bad, "{\"kind\": \"skew_linear\"").unwrap();
    assert_eq!(code(&svph(&["spectrum", "--config", bad.to_str().unwrap()])), 2);
}

#[test]
fn malformed_experiment_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset("doubling_skew").unwrap();
    cfg.spectral.q = 48;
    cfg.montecarlo.n_list = vec![64, 32];
    cfg.llt.delta = 1.5;
    let path = write_json(dir.path(), "exp.json", &cfg);
    let o = svph(&["full", "--config", &path, "--out", dir.path().join("out").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["Q", "n_list", "delta"] {
        assert!(err.contains(field), "{field} missing from: {err}");
    }
    assert!(!dir.path().join("out").exists());
}

#[test]
fn stage_failures_exit_3() {
    // a rigid rotation fibre: cos(2πθ) never decorrelates
    let dir = tempfile::tempdir().unwrap();
    let map = write_json(dir.path(), "map.json", &MapSpec::skew_linear(2, FourierTable::constant(0.5)).unwrap());
    let obs = write_json(dir.path(), "obs.json", &Observable::new(FourierTable::cos(1.0, 0, 1)));
    let o = svph(&["diffusion", "--config", &map, "--obs", &obs, "--K", "4"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
