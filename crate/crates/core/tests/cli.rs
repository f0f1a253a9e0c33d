use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn deepide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepide")).args(args).output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_reduces_loss_on_toy() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = deepide(&["train", "--config", s(&fixture("toy1.json")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = json(&out.join("summary.json"));
    assert!(summary["ratio"].as_f64().unwrap() <= 0.01, "{summary}");
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let outputs: Vec<&str> = manifest["outputs"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(outputs.contains(&"loss.csv"), "{outputs:?}");
    assert!(out.join("checkpoint/checkpoint.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let o = deepide(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"y_grid": {"lower": [0.0], "upper": [1.0], "counts": [4]}, "nonsense": 1}"#).unwrap();
    let o = deepide(&["forward", "--config", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    let err: Value = serde_json::from_slice(o.stderr.trim_ascii()).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string());
}

#[test]
fn mismatched_bundle_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(fixture("toy1.json")).unwrap();
    let mut v: Value = serde_json::from_str(&cfg).unwrap();
    // the digits bundle lives on (0,1)², the config on (0,1)
    v["data"] = Value::String(fixture("digits8x8/bundle.json").display().to_string());
    let path = tmp.path().join("cfg.json");
    fs::write(&path, v.to_string()).unwrap();
    let o = deepide(&["forward", "--config", s(&path), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));

    v["data"] = Value::String(tmp.path().join("nowhere/bundle.json").display().to_string());
    fs::write(&path, v.to_string()).unwrap();
    let o = deepide(&["forward", "--config", s(&path), "--out", s(&tmp.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = deepide(&["check", "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.contains("PASS")));
    assert_eq!(fs::read_to_string(tmp.path().join("checks.csv")).unwrap().lines().count(), 9);
}

#[test]
fn hjb_commands_on_one_cell_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("hjb1.json");
    let o = deepide(&["hjb-eval", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(json(&tmp.path().join("hjb_eval.json"))["value"].is_number());
    let o = deepide(&["hjb-value", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&tmp.path().join("hjb_value.json"));
    assert!(v["value"].as_f64().unwrap() >= 0.0, "{v}");
}

#[test]
fn pontryagin_box_override() {
    let tmp = tempfile::tempdir().unwrap();
    let o = deepide(&[
        "--seed",
        "3",
        "pontryagin",
        "--config",
        s(&fixture("toy1.json")),
        "--out",
        s(tmp.path()),
        "--box",
        "-0.5,0.5,-0.5,0.5",
        "--sweeps",
        "5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = json(&tmp.path().join("manifest.json"));
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["bounds"]["a_max"], 0.5);
    let sweeps = fs::read_to_string(tmp.path().join("sweeps.csv")).unwrap();
    assert!(sweeps.lines().count() >= 2);
    assert!(json(&tmp.path().join("summary.json"))["control_bv"].as_f64().unwrap() >= 0.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture("toy3.json");
    let run = |dir: &str, threads: &str| {
        let out = tmp.path().join(dir);
        let o = deepide(&["--threads", threads, "forward", "--config", s(&cfg), "--out", s(&out)]);
        assert!(o.status.success());
        out
    };
    let (a, b) = (run("a", "1"), run("b", "3"));
    let mut names: Vec<_> = fs::read_dir(a.join("trajectory")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(fs::read(a.join("trajectory").join(&n)).unwrap(), fs::read(b.join("trajectory").join(&n)).unwrap(), "{n:?}");
    }
}
