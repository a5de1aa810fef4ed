mod common;

use std::fs;

use calireg::calib::{CalibrationArtifact, PredictionRecord};
use calireg::data::Split;
use calireg::metrics::{EvalReport, IntervalConvention, Observation};
use calireg::net::load_checkpoint;
use calireg::pipeline::{cmd_eval, load_split, predict_records, run_all, split_path, RunConfig};

fn small_run(dir: &std::path::Path) -> (RunConfig, calireg::pipeline::RunSummary) {
    let mut cfg = common::run_config(2);
    cfg.synth.n_samples = 3000;
    cfg.train.epochs = 5;
    cfg.classify.n_trees = 20;
    cfg.out_dir = Some(dir.to_path_buf());
    let summary = run_all(&cfg).unwrap();
    (cfg, summary)
}

fn valid_records(summary: &calireg::pipeline::RunSummary) -> Vec<PredictionRecord> {
    let (model, _) = load_checkpoint(&summary.paths.checkpoint()).unwrap();
    let valid = load_split(&summary.paths.data(), Split::Valid).unwrap();
    predict_records(&model, &valid).unwrap()
}

#[test]
fn calibration_artifact_matches_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, summary) = small_run(tmp.path());
    let art = CalibrationArtifact::load(&summary.paths.calibration()).unwrap();
    let recs = valid_records(&summary);

    let mean_sq = recs
        .iter()
        .map(|r| ((r.target.unwrap() - r.y_hat) / r.sigma).powi(2))
        .sum::<f64>()
        / recs.len() as f64;
    let s = mean_sq.sqrt();
    assert!((art.s_star - s).abs() <= 1e-12 * s, "{} vs {s}", art.s_star);

    for c in art.bin_coverage(&recs).into_iter().flatten() {
        assert!(c > cfg.calib.xi, "bin coverage {c}");
    }

    // single-factor ablation on the same bins
    let global = CalibrationArtifact::global_only(art.s_star, art.y_min, art.delta, art.n_bins(), art.xi);
    let worst_global = global.bin_coverage(&recs).into_iter().flatten().fold(1.0, f64::min);
    for c in art.bin_coverage(&recs).into_iter().flatten() {
        assert!(c >= worst_global);
    }

    let raw = fs::read_to_string(summary.paths.calibration()).unwrap();
    let json: serde_json::Value = serde_json::from_str(&raw).unwrap();
    for key in ["format_version", "s_star", "y_min", "delta", "xi", "eta", "fallback_eta", "source_checkpoint_hash"] {
        assert!(json.get(key).is_some(), "artifact lacks {key}");
    }
}

#[test]
fn identity_artifact_equals_skipping_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, summary) = small_run(tmp.path());
    let ckpt = summary.paths.checkpoint();
    let test = split_path(&summary.paths.data(), Split::Test).unwrap();
    let identity = tmp.path().join("identity.json");
    CalibrationArtifact::identity().save(&identity).unwrap();

    let out = |name: &str| tmp.path().join(name);
    let a = cmd_eval(&cfg, &ckpt, Some(&identity), &test, &out("a.json"), &out("a.txt")).unwrap();
    let b = cmd_eval(&cfg, &ckpt, None, &test, &out("b.json"), &out("b.txt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read(out("a.json")).unwrap(), fs::read(out("b.json")).unwrap());
}

#[test]
fn perfect_predictions_report_zero_error() {
    let obs: Vec<Observation> = (0..50).map(|i| Observation::new(i as f64 * 0.1, 0.5, i as f64 * 0.1)).collect();
    let report = EvalReport::compute(&obs, &[0.9], IntervalConvention::HalfQuantile).unwrap();
    assert_eq!(report.mse, 0.0);
    assert_eq!(report.mae, 0.0);
    assert_eq!(report.interval_coverage_095, 1.0);
    assert_eq!(report.spearman, Some(1.0));
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, sa) = small_run(a.path());
    let (_, sb) = small_run(b.path());
    // config.json records its own out_dir
    let strip = |m: &std::collections::BTreeMap<String, String>| {
        m.iter().filter(|(k, _)| *k != "config.json").map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>()
    };
    assert_eq!(strip(&sa.manifest), strip(&sb.manifest));
    assert!(sa.manifest.contains_key("model.json"));
}
