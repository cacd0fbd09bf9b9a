// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitquant"))
        .args(args)
        .env("CIRCUITQUANT_THREADS", "1")
        .output()
        .expect("spawn circuitquant")
}

fn ok(args: &[&str]) -> Output {
    let o = cq(args);
    assert!(
        o.status.success(),
        "{args:?} exited {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_task_is_bit_identical() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["gen-task", "--seed", "7", "--out", s(&a)]);
    ok(&["gen-task", "--seed", "7", "--out", s(&b)]);
    for f in ["weights.bin", "dataset.jsonl", "task.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        let y = std::fs::read(b.join(f)).unwrap();
        assert!(!x.is_empty(), "{f} empty");
        assert_eq!(x, y, "{f} differs");
    }
}

#[test]
fn run_acdc_pahq_finds_a_circuit() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    ok(&["run-acdc", "--method", "pahq", "--tau", "0.01", "--out", s(&out)]);
    let r = report(&out.join("run-acdc.json"));
    assert_eq!(r["config"]["method"], "pahq");
    let circuit = r["circuit"].as_array().expect("circuit array");
    assert!(!circuit.is_empty());
    assert!(out.join("scores.csv").exists());
}

#[test]
fn run_acdc_from_saved_weights() {
    let tmp = TempDir::new().unwrap();
    let task = tmp.path().join("task");
    let out = tmp.path().join("run");
    ok(&["gen-task", "--out", s(&task)]);
    let w = task.join("weights.bin");
    ok(&["run-acdc", "--weights", s(&w), "--out", s(&out)]);
    let r = report(&out.join("run-acdc.json"));
    assert!(!r["circuit"].as_array().unwrap().is_empty());
}

#[test]
fn sweep_roc_ranks_pahq_above_rtn8() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("roc");
    ok(&["sweep-roc", "--out", s(&out)]);
    let auc = &report(&out.join("sweep-roc.json"))["extra"]["auc"];
    let (pahq, rtn8) = (auc["pahq"].as_f64().unwrap(), auc["rtn8"].as_f64().unwrap());
    assert!(pahq > rtn8, "pahq {pahq} rtn8 {rtn8}");
    for m in ["acdc", "rtn8", "pahq"] {
        assert!(out.join(format!("roc_{m}.csv")).exists());
    }
}

#[test]
fn empty_config_plus_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("empty.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = tmp.path().join("o");
    ok(&["run-acdc", "--config", s(&cfg), "--tau", "0.02", "--out", s(&out)]);
    assert_eq!(report(&out.join("run-acdc.json"))["config"]["tau"], 0.02);
}

#[test]
fn negative_tau_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let o = cq(&["run-acdc", "--tau", "-1", "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("tau"), "{err}");
}

#[test]
fn flag_beats_file() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "tau = 0.5\nmax_steps = 3\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["run-acdc", "--config", s(&cfg), "--tau", "0.03", "--out", s(&out)]);
    let c = &report(&out.join("run-acdc.json"))["config"];
    assert_eq!(c["tau"], 0.03);
    assert_eq!(c["max_steps"], 3);
}

#[test]
fn unknown_flag_prints_usage() {
    let o = cq(&["run-acdc", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "taus = 1.0\n").unwrap();
    let o = cq(&["run-acdc", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_weights_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let w = tmp.path().join("nope.bin");
    let o = cq(&["run-acdc", "--weights", s(&w), "--out", s(tmp.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn deterministic_report_reruns_from_its_own_config() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    ok(&["run-acdc", "--seed", "3", "--deterministic-report", "--out", s(&out)]);
    let first = std::fs::read(out.join("run-acdc.json")).unwrap();
    let saved = tmp.path().join("first.json");
    std::fs::write(&saved, &first).unwrap();
    ok(&["run-acdc", "--config", s(&saved)]);
    let second = std::fs::read(out.join("run-acdc.json")).unwrap();
    assert_eq!(first, second);
}
