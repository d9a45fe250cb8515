use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eigendistort::fixtures::fixture_image;
use eigendistort::io::{save_image, ImageFormat};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eigendistort"))
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn image(dir: &Path) -> String {
    let p = dir.join("x.f32");
    save_image(&fixture_image(5, 16, 16), &p, ImageFormat::RawF32).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn mse_synth_is_flat_and_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(dir.path());
    let out = dir.path().join("s");
    let o = run(&["synth", "--model", "mse", "--image", &x, "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("eigen.json"));
    assert!((r["lambda_max"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((r["lambda_min"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(r["flags"]["degenerate_spectrum"], true);
    assert!(out.join("e_max.f32").exists() && out.join("e_min.f32.json").exists());
}

#[test]
fn synth_agrees_with_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(dir.path());
    let s = dir.path().join("s");
    let o = dir.path().join("o");
    assert!(run(&["synth", "--model", "lgg", "--image", &x, "--out-dir", s.to_str().unwrap()]).status.success());
    assert!(run(&["oracle", "--model", "lgg", "--image", &x, "--out-dir", o.to_str().unwrap()]).status.success());
    let a = json(&s.join("eigen.json"))["lambda_max"].as_f64().unwrap();
    let b = json(&o.join("oracle.json"))["lambda_max"].as_f64().unwrap();
    assert!((a - b).abs() <= 1e-3 * b, "{a} vs {b}");
}

#[test]
fn dataset_then_eval_recovers_generator() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let o = run(&["dataset", "--model", "lgg", "--fixtures", "1", "--records", "12", "--out-dir", ds.to_str().unwrap()]);
    assert!(o.status.success());
    let m = ds.join("manifest.csv");
    let o = run(&["eval", "--model", "lgg", "--manifest", m.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "rho=1.000000");
}

#[test]
fn exit_codes_and_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(dir.path());
    let out = dir.path().join("s");
    let out = out.to_str().unwrap();

    let o = run(&["synth", "--model", "bogus", "--image", &x, "--out-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:param:"));

    let o = run(&["synth", "--image", &x, "--out-dir", out, "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:usage:"));

    let missing = dir.path().join("missing.f32");
    let o = run(&["synth", "--image", missing.to_str().unwrap(), "--out-dir", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:io:"));

    let o = run(&["synth", "--model", "lgg", "--image", &x, "--out-dir", out, "--max-iters", "3"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:convergence:"));
}

#[test]
fn simulate_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let x = image(dir.path());
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--model", "mse", "--image", &x, "--subjects", "1", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("report.json"));
    assert_eq!(r["d"]["entries"].as_array().unwrap().len(), 1);
    assert!(r["d"]["d"].as_f64().unwrap().abs() < 1.0);
}
