use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn calireg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calireg"))
        .args(args)
        .env_remove("CALIREG_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const SMALL: &[&str] = &[
    "--synth.n_samples",
    "400",
    "--train.epochs",
    "2",
    "--classify.n_trees",
    "5",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn digests(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, hex::encode(Sha256::digest(fs::read(&p).unwrap())))
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synth_writes_four_files_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let run = run.to_str().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        let o = calireg(&with_small(&["synth", "--run-dir", run, "--out", out.to_str().unwrap()]));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let da = digests(&a);
    assert_eq!(da.len(), 4);
    assert_eq!(da, digests(&b));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    assert_eq!(code(&calireg(&["synth", "--run-dir", run, "--train.nope", "1"])), 2);
    assert_eq!(code(&calireg(&["synth", "--run-dir", run, "--synth.n_samples", "lots"])), 2);
    assert_eq!(code(&calireg(&["frobnicate"])), 2);
    let missing = tmp.path().join("missing.json");
    assert_eq!(code(&calireg(&["synth", "--config", missing.to_str().unwrap()])), 2);
}

#[test]
fn missing_inputs_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    assert_eq!(code(&calireg(&["train", "--run-dir", run])), 2);
    assert_eq!(code(&calireg(&["eval", "--run-dir", run])), 2);
}

#[test]
fn diverging_training_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().to_str().unwrap();
    assert_eq!(code(&calireg(&with_small(&["synth", "--run-dir", run]))), 0);
    let o = calireg(&with_small(&["train", "--run-dir", run, "--train.learning_rate", "1e300"]));
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epoch"));
}

#[test]
fn stages_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let run = run_dir.to_str().unwrap();
    for stage in ["synth", "train", "calibrate"] {
        let o = calireg(&with_small(&[stage, "--run-dir", run]));
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }

    // calibration refuses xi outside (0, 1)
    assert_eq!(code(&calireg(&["calibrate", "--run-dir", run, "--calib.xi", "1"])), 2);

    let o = calireg(&["eval", "--run-dir", run, "--alpha", "0.99,0.8,0.9"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("eval.json")).unwrap()).unwrap();
    let alphas: Vec<f64> = report["intervals"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["alpha"].as_f64().unwrap())
        .collect();
    assert_eq!(alphas, vec![0.99, 0.8, 0.9]);
    for key in ["mse", "mae", "spearman", "pearson", "uce", "nll", "interval_coverage_095", "mean_interval_len_095"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }

    for stage in ["classify", "filter"] {
        let o = calireg(&[stage, "--run-dir", run]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let classify: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("classify.json")).unwrap()).unwrap();
    assert!(classify["baseline"]["auc"].is_number());
    assert!(classify["gbdt"]["auc"].is_number());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(run_dir.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_object().unwrap();
    for f in ["config.json", "model.json", "calibration.json", "eval.json", "forest.json", "filter.csv", "data/header.json"] {
        assert!(files.contains_key(f), "manifest lacks {f}");
    }
}
