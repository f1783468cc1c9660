use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn deepnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepnorm")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&out.stdout)))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn close(a: &Value, b: f64, tol: f64) -> bool {
    (a.as_f64().unwrap() - b).abs() < tol
}

#[test]
fn gains_single_stack() {
    let out = deepnorm(&["gains", "--arch", "encoder_only", "--n", "12"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert!(close(&v["alpha"], 24f64.powf(0.25), 1e-12));
    assert!(close(&v["beta"], 96f64.powf(-0.25), 1e-12));
    assert!(close(&v["alpha"], 2.21336, 1e-5));

    let v = json(&deepnorm(&["gains", "--arch", "decoder_only", "--m", "1"]));
    assert!(close(&v["alpha"], 1.18921, 1e-5));
    assert!(close(&v["beta"], 0.59460, 1e-5));
}

#[test]
fn gains_rounded_within_half_percent() {
    let exact = json(&deepnorm(&["gains", "--arch", "encoder_decoder", "--n", "18", "--m", "18", "--exact"]));
    let rounded = json(&deepnorm(&["gains", "--arch", "encoder_decoder", "--n", "18", "--m", "18", "--rounded"]));
    assert_eq!(rounded["form"], "rounded");
    let (e, r) = (exact["gains"]["alpha_enc"].as_f64().unwrap(), rounded["gains"]["alpha_enc"].as_f64().unwrap());
    assert!(e != r && ((r - e) / e).abs() < 5e-3);
    assert_eq!(exact["gains"]["alpha_dec"], rounded["gains"]["alpha_dec"]);
}

#[test]
fn gains_usage_errors_exit_2() {
    for args in [
        &["gains", "--arch", "encoder_decoder", "--n", "6"][..],
        &["gains", "--arch", "encoder_only"],
        &["gains", "--arch", "sideways", "--n", "2"],
        &["gains", "--arch", "encoder_only", "--n", "0"],
        &["gains", "--arch", "encoder_only", "--n", "2", "--exact", "--rounded"],
    ] {
        let out = deepnorm(args);
        assert_eq!(code(&out), 2, "{args:?}");
        assert!(out.stdout.is_empty());
    }
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn verify_identities_pass() {
    let out = deepnorm(&["verify", "--suite", "identities"]);
    assert_eq!(code(&out), 0);
    let v = json(&out);
    assert_eq!(v["passed"], true);
    assert!(v["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}

#[test]
fn verify_thm1_and_halved_alpha_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "thm1.json", r#"{"trials": 200, "families": ["deepnorm"]}"#);
    let ok = deepnorm(&["verify", "--suite", "thm1", "--config", &cfg]);
    assert_eq!(code(&ok), 0);
    let worst = json(&ok)["checks"].as_array().unwrap().iter().map(|c| c["detail"]["ratio"].as_f64().unwrap()).fold(0.0, f64::max);
    assert!(worst <= 1.01);

    let bad = deepnorm(&["verify", "--suite", "thm1", "--config", &cfg, "--alpha-scale", "0.5"]);
    assert_eq!(code(&bad), 1);
    assert_eq!(json(&bad)["passed"], false);
}

#[test]
fn verify_malformed_config_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [("unknown.json", r#"{"trails": 5}"#), ("broken.json", "{"), ("zero.json", r#"{"depths": [0]}"#)] {
        let cfg = write(dir.path(), name, text);
        assert_eq!(code(&deepnorm(&["verify", "--suite", "lemma1", "--config", &cfg])), 2, "{name}");
    }
    let missing = dir.path().join("absent.json").display().to_string();
    assert_eq!(code(&deepnorm(&["verify", "--suite", "lemma1", "--config", &missing])), 2);
}

const SWEEP: &str = r#"{
  "schema_version": 1,
  "model": {"arch_kind": "encoder_decoder", "d_model": 16, "n_heads": 2, "d_ffn": 32, "vocab_size": 9, "max_seq_len": 8},
  "train": {"optimizer": {"kind": "adam"}, "lr": 0.001, "steps": 12, "batch_size": 4,
            "task": {"kind": "reverse", "vocab_size": 8, "seq_len": 4}, "record_interval": 4},
  "sweep": {"schemes": ["post_ln", "deepnorm"], "depths": [1, 2], "seeds": [1, 2]}
}"#;

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn train_writes_csvs_and_index_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "sweep.json", SWEEP);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = deepnorm(&["train", "--config", &cfg, "--out", a.to_str().unwrap(), "--workers", "1"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(json(&first)["runs"], 8);
    let second = deepnorm(&["train", "--config", &cfg, "--out", b.to_str().unwrap(), "--workers", "3"]);
    assert_eq!(code(&second), 0);

    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.iter().filter(|(n, _)| n.ends_with(".csv")).count(), 8);
    assert!(fa.iter().any(|(n, _)| n == "index.json"));
    assert!(fa == fb, "rerun produced different bytes");

    let csv = String::from_utf8(fa.iter().find(|(n, _)| n == "deepnorm_d2_s1.csv").unwrap().1.clone()).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..4], &["step", "loss", "lr", "model_update"]);
    // Two encoder layers of 2 sub-layers and two decoder layers of 3, each with a gradient and an LN column.
    assert_eq!(header.len(), 4 + 2 * 10);
    assert_eq!(csv.lines().count(), 1 + 4);

    let index: Value = serde_json::from_slice(&fa.iter().find(|(n, _)| n == "index.json").unwrap().1).unwrap();
    assert_eq!(index["schema_version"], 1);
    assert_eq!(index["runs"].as_array().unwrap().len(), 8);
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = SWEEP.replace(r#""seeds": [1, 2]"#, r#""seeds": []"#);
    let cfg = write(dir.path(), "empty.json", &empty);
    let out = deepnorm(&["train", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("sweep"));

    let good = write(dir.path(), "good.json", SWEEP);
    let blocker = write(dir.path(), "not_a_dir", "");
    assert_eq!(code(&deepnorm(&["train", "--config", &good, "--out", &blocker])), 2);

    let small_vocab = SWEEP.replace(r#""vocab_size": 9"#, r#""vocab_size": 8"#);
    let cfg = write(dir.path(), "vocab.json", &small_vocab);
    assert_eq!(code(&deepnorm(&["train", "--config", &cfg, "--out", dir.path().join("v").to_str().unwrap()])), 2);
}

#[test]
fn fit_points_and_index() {
    let dir = tempfile::tempdir().unwrap();
    let e = std::f64::consts::E;
    let pts = write(dir.path(), "pts.json", &format!(r#"[{{"depth": {e}, "score": 1}}, {{"depth": {}, "score": 2}}]"#, e * e));
    let v = json(&deepnorm(&["fit", "--points", &pts]));
    assert!(close(&v["a"], 1.0, 1e-12) && close(&v["b"], 0.0, 1e-12) && close(&v["residual"], 0.0, 1e-12));

    let flat = write(dir.path(), "flat.json", r#"[{"depth": 1, "score": 5}, {"depth": 10, "score": 5}]"#);
    let v = json(&deepnorm(&["fit", "--points", &flat]));
    assert!(close(&v["a"], 0.0, 1e-12) && close(&v["b"], 5.0, 1e-12));

    let dup = write(dir.path(), "dup.json", r#"[{"depth": 4, "score": 1}, {"depth": 4, "score": 2}]"#);
    assert_eq!(code(&deepnorm(&["fit", "--points", &dup])), 2);
    assert_eq!(code(&deepnorm(&["fit"])), 2);

    let cfg = write(dir.path(), "sweep.json", SWEEP);
    let out = dir.path().join("runs");
    assert_eq!(code(&deepnorm(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--workers", "1"])), 0);
    let index = out.join("index.json").display().to_string();
    let v = json(&deepnorm(&["fit", "--index", &index, "--scheme", "deepnorm"]));
    assert_eq!(v["points"], 2);
    assert!(v["a"].as_f64().unwrap().is_finite());
    assert_eq!(code(&deepnorm(&["fit", "--index", &index, "--metric", "nonsense"])), 2);
}
