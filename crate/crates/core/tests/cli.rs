//! End-to-end runs of the `caba` binary on small synthetic corpora.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn caba(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_caba"));
    cmd.args(args).env_remove("CABA_SEED").env("RUST_LOG", "warn");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn tiny_config(dir: &Path, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "synth": {
            "subjects": 3,
            "sessions_per_subject": 1,
            "blocks_per_session": 2,
            "trials_per_block": 8,
            "shape": [8, 4, 2]
        },
        "model": {"width": 4, "layers": 1, "temporal_hidden": 8, "channel_hidden": 8},
        "train": {"max_epochs": 3, "patience": 3, "batch_size": 8, "learning_rate": 0.01}
    });
    merge(&mut cfg, extra);
    let path = dir.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn merge(base: &mut Value, extra: Value) {
    match (base, extra) {
        (Value::Object(b), Value::Object(e)) => {
            for (k, v) in e {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, e) => *b = e,
    }
}

fn synth(dir: &Path, config: &Path, seed: &str) -> PathBuf {
    let data = dir.join(format!("data-{seed}"));
    let out = caba(&["synth", "--out", data.to_str().unwrap(), "--seed", seed], Some(config));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic_and_guards_output() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({}));
    let a = synth(tmp.path(), &config, "9");
    let b = tmp.path().join("again");
    assert_eq!(code(&caba(&["synth", "--out", b.to_str().unwrap(), "--seed", "9"], Some(&config))), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));

    let again = caba(&["synth", "--out", a.to_str().unwrap(), "--seed", "9"], Some(&config));
    assert_eq!(code(&again), 1);
    let forced = caba(&["synth", "--out", a.to_str().unwrap(), "--seed", "9", "--force"], Some(&config));
    assert_eq!(code(&forced), 0);
}

#[test]
fn kfold_writes_summary_with_every_fold() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({"synth": {"subjects": 2}}));
    let data = synth(tmp.path(), &config, "1");
    let out = tmp.path().join("kfold");
    let run = caba(
        &["kfold", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--kfold", "2", "--seed", "1"],
        Some(&config),
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let folds = summary["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 2);
    let mean = folds.iter().map(|f| f["accuracy"].as_f64().unwrap()).sum::<f64>() / 2.0;
    assert!((summary["mean_accuracy"].as_f64().unwrap() - mean).abs() < 1e-12);
    for name in ["history.jsonl", "folds.csv", "folds.json", "config.json"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn ablation_without_alpha_has_zero_delta() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({"train": {"alpha": 0.0}}));
    let data = synth(tmp.path(), &config, "2");
    let out = tmp.path().join("ablate");
    let run = caba(&["ablate", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&config));
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["delta"].as_f64().unwrap(), 0.0);
    let trajectory = |name: &str| -> Vec<(f64, f64, f64)> {
        fs::read_to_string(out.join(name))
            .unwrap()
            .lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["loss"].as_f64().unwrap(), v["val_ce"].as_f64().unwrap(), v["val_acc"].as_f64().unwrap())
            })
            .collect()
    };
    assert_eq!(trajectory("history_with_caba.jsonl"), trajectory("history_without_caba.jsonl"));
}

#[test]
fn diagnose_reports_four_scenarios() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({"synth": {"sessions_per_subject": 3}}));
    let data = synth(tmp.path(), &config, "3");
    let out = tmp.path().join("diagnose");
    let run = caba(&["diagnose", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&config));
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let mut reader = csv::Reader::from_path(out.join("diagnose.csv")).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), ["scenario", "WD", "Acc"]);
    let scenarios: Vec<String> = reader.records().map(|r| r.unwrap()[0].to_string()).collect();
    assert_eq!(
        scenarios,
        ["split-by-trial", "split-by-block", "split-by-session", "split-by-subject"]
    );
}

#[test]
fn train_then_mask_from_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(tmp.path(), json!({}));
    let data = synth(tmp.path(), &config, "4");
    let train_out = tmp.path().join("train");
    let run = caba(&["train", "--data", data.to_str().unwrap(), "--out", train_out.to_str().unwrap()], Some(&config));
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let ckpt = train_out.join("best.ckpt");
    assert!(ckpt.is_file());

    let mask_out = tmp.path().join("mask");
    let run = caba(
        &[
            "mask",
            "--data",
            data.to_str().unwrap(),
            "--out",
            mask_out.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        Some(&config),
    );
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let rows = csv::Reader::from_path(mask_out.join("mask.csv")).unwrap().records().count();
    assert_eq!(rows, 2);
}

#[test]
fn gridsearch_writes_grid_and_alpha_curve() {
    let tmp = TempDir::new().unwrap();
    let config = tiny_config(
        tmp.path(),
        json!({"grid": {"learning_rates": [0.01], "dropouts": [0.0], "alphas": [0.0, 1.0]}, "kfold": {"k": 3}}),
    );
    let data = synth(tmp.path(), &config, "5");
    let out = tmp.path().join("grid");
    let run = caba(&["gridsearch", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&config));
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(csv::Reader::from_path(out.join("grid.csv")).unwrap().records().count(), 2);
    assert_eq!(csv::Reader::from_path(out.join("alpha_curve.csv")).unwrap().records().count(), 2);
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = TempDir::new().unwrap();

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"learning_rat": 0.1}}"#).unwrap();
    assert_eq!(code(&caba(&["kfold"], Some(&bad))), 1);
    assert_eq!(code(&caba(&["kfold", "--split", "diagonal"], None)), 1);

    let missing = tmp.path().join("nowhere");
    let out = tmp.path().join("o");
    let run = caba(&["kfold", "--data", missing.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&run), 2);

    let config = tiny_config(tmp.path(), json!({"train": {"learning_rate": 1e300}}));
    let data = synth(tmp.path(), &config, "6");
    let run = caba(&["kfold", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()], Some(&config));
    assert_eq!(code(&run), 3, "{}", String::from_utf8_lossy(&run.stderr));
}
