use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::calib::{fit_calibration, CalibrationArtifact, PredictionRecord};
use crate::data::{self, Dataset, Split, SplitFractions, TargetTransform, HEADER_FILE};
use crate::error::{Error, Result};
use crate::filter::{self, FilterRow};
use crate::gbdt::{train_gbdt, Forest};
use crate::json;
use crate::kde::{fit_kde, WeightScheme};
use crate::metrics::{
    classification_metrics, ClassificationMetrics, EvalReport, IntervalConvention, Observation,
};
use crate::net::{load_checkpoint, save_checkpoint, train, RegressorModel, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Standard file layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunPaths { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn calibration(&self) -> PathBuf {
        self.root.join("calibration.json")
    }
    pub fn eval_json(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn eval_table(&self) -> PathBuf {
        self.root.join("eval.txt")
    }
    pub fn forest(&self) -> PathBuf {
        self.root.join("forest.json")
    }
    pub fn classify(&self) -> PathBuf {
        self.root.join("classify.json")
    }
    pub fn filter_csv(&self) -> PathBuf {
        self.root.join("filter.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = json::to_canonical_string(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Path of one split inside a dataset directory, taken from its header.
pub fn split_path(data_dir: &Path, split: Split) -> Result<PathBuf> {
    let header = data::read_header(&data_dir.join(HEADER_FILE))?;
    let name = header
        .split
        .get(&split)
        .ok_or_else(|| Error::Schema(format!("{} has no {} split", data_dir.display(), split.as_str())))?;
    Ok(data_dir.join(name))
}

pub fn load_split(data_dir: &Path, split: Split) -> Result<Dataset> {
    data::load_dataset(&split_path(data_dir, split)?)
}

/// Generates the synthetic pool, splits it, fits the target transform on the
/// training part and writes the three splits plus `header.json`.
pub fn cmd_synth(cfg: &RunConfig, data_dir: &Path) -> Result<()> {
    cfg.synth.validate()?;
    let pool = data::generate_synthetic(&cfg.synth)?;
    let (train, valid, test) = data::prepare_splits(&pool, cfg.transform, SplitFractions::default())?;
    log::info!(
        "synth: {} train / {} valid / {} test samples, L = {}",
        train.len(),
        valid.len(),
        test.len(),
        train.series_len
    );
    data::save_splits(data_dir, &train, &valid, &test)
}

pub fn build_model(cfg: &RunConfig, input_len: usize) -> Result<RegressorModel> {
    RegressorModel::new(cfg.model.architecture(input_len), cfg.model.eps_sigma, cfg.model.seed)
}

pub fn weight_scheme(cfg: &RunConfig, train_ds: &Dataset) -> Result<WeightScheme> {
    let targets = train_ds.targets();
    let density = fit_kde(&targets, cfg.train.bandwidth)?;
    WeightScheme::new(density, cfg.train.lambda2, &targets, cfg.train.normalize_weights)
}

fn write_history(outcome: &TrainOutcome, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["epoch", "weighted_l1", "gauss_nll", "total", "val_nll"])?;
    for r in &outcome.history {
        w.write_record([
            r.epoch.to_string(),
            json::format_f64(r.weighted_l1),
            json::format_f64(r.gauss_nll),
            json::format_f64(r.total),
            r.val_nll.map(json::format_f64).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains on the dataset's train split (validation split for model
/// selection) and writes the checkpoint and per-epoch history CSV.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, history: &Path) -> Result<TrainOutcome> {
    let train_ds = load_split(data_dir, Split::Train)?;
    let valid = load_split(data_dir, Split::Valid)?;
    let model = build_model(cfg, train_ds.series_len)?;
    let ws = weight_scheme(cfg, &train_ds)?;
    let outcome = train(model, &train_ds, Some(&valid), &cfg.train, &ws)?;
    save_checkpoint(&outcome.model, train_ds.transform, checkpoint)?;
    write_history(&outcome, history)?;
    Ok(outcome)
}

/// Predictions in the dataset's (transformed) target space, with ground truth
/// attached.
pub fn predict_records(model: &RegressorModel, ds: &Dataset) -> Result<Vec<PredictionRecord>> {
    ds.samples
        .iter()
        .map(|s| {
            let (y_hat, sigma) = model.forward(&s.series)?;
            Ok(PredictionRecord::new(s.id.clone(), y_hat, sigma, Some(s.target)))
        })
        .collect()
}

/// Transformed-space predictions of a checkpoint on a dataset file, and the
/// transform that maps them back to raw units.
pub fn checkpoint_records(checkpoint: &Path, ds_path: &Path) -> Result<(Vec<PredictionRecord>, TargetTransform)> {
    let (model, transform) = load_checkpoint(checkpoint)?;
    let ds = data::load_dataset(ds_path)?;
    if ds.transform != transform {
        return Err(Error::Schema(format!(
            "{} was prepared with a different target transform than the checkpoint",
            ds_path.display()
        )));
    }
    Ok((predict_records(&model, &ds)?, transform))
}

pub fn load_artifact(path: Option<&Path>, checkpoint: &Path) -> Result<Option<CalibrationArtifact>> {
    let Some(path) = path else { return Ok(None) };
    let art = CalibrationArtifact::load(path)?;
    if let Some(h) = &art.source_checkpoint_hash {
        if *h != sha256_file(checkpoint)? {
            log::warn!("{} was fitted for a different checkpoint", path.display());
        }
    }
    Ok(Some(art))
}

/// Raw-unit observations. Scales are calibrated in transformed space first
/// (unchanged without an artifact), then mapped back with the transform.
pub fn observations(
    records: &[PredictionRecord],
    transform: &TargetTransform,
    art: Option<&CalibrationArtifact>,
) -> Vec<Observation> {
    records
        .iter()
        .map(|r| {
            let sigma = art.map_or(r.sigma, |a| a.calibrate(r.y_hat, r.sigma));
            Observation::new(
                transform.invert(r.y_hat),
                transform.invert_scale(r.y_hat, sigma),
                r.target.map_or(f64::NAN, |y| transform.invert(y)),
            )
        })
        .collect()
}

/// Fits global and per-bin scale factors on the validation split.
pub fn cmd_calibrate(cfg: &RunConfig, checkpoint: &Path, valid_path: &Path, out: &Path) -> Result<CalibrationArtifact> {
    let (records, _) = checkpoint_records(checkpoint, valid_path)?;
    let mut art = fit_calibration(&records, cfg.calib.delta, cfg.calib.xi)?;
    art.source_checkpoint_hash = Some(sha256_file(checkpoint)?);
    art.save(out)?;
    Ok(art)
}

pub fn convention(cfg: &RunConfig) -> IntervalConvention {
    if cfg.eval.standard_z {
        IntervalConvention::StandardZ
    } else {
        IntervalConvention::HalfQuantile
    }
}

/// Test-set report: regression, uncertainty and interval metrics, plus the
/// threshold-on-prediction classifier at the configured raw threshold.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    artifact: Option<&Path>,
    test_path: &Path,
    out_json: &Path,
    out_table: &Path,
) -> Result<EvalReport> {
    let (records, transform) = checkpoint_records(checkpoint, test_path)?;
    let art = load_artifact(artifact, checkpoint)?;
    let obs = observations(&records, &transform, art.as_ref());
    let mut report = EvalReport::compute(&obs, &cfg.eval.alphas, convention(cfg))?;
    let t = cfg.classify.threshold;
    let labels: Vec<bool> = obs.iter().map(|o| o.target > t).collect();
    let scores: Vec<f64> = obs.iter().map(|o| o.y_hat).collect();
    report.classification = Some(classification_metrics(&scores, &labels, t)?);
    write_json(&report, out_json)?;
    fs::write(out_table, report.to_table()).map_err(|e| Error::io(out_table, e))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub threshold: f64,
    pub entropy_feature: bool,
    pub n_train: usize,
    pub n_test: usize,
    /// Prediction thresholded at the clinical cut.
    pub baseline: ClassificationMetrics,
    /// Boosted trees on the (prediction, calibrated scale) pair.
    pub gbdt: ClassificationMetrics,
}

/// Decision-layer features: prediction, calibrated scale and optionally the
/// predictive entropy.
pub fn decision_features(obs: &[Observation], entropy_feature: bool) -> Result<Vec<Vec<f64>>> {
    obs.iter()
        .map(|o| {
            let mut f = vec![o.y_hat, o.sigma];
            if entropy_feature {
                f.push(filter::entropy(o.sigma)?);
            }
            Ok(f)
        })
        .collect()
}

/// Trains the decision layer on train + validation and compares it with the
/// thresholded prediction on the test split.
pub fn cmd_classify(
    cfg: &RunConfig,
    checkpoint: &Path,
    artifact: Option<&Path>,
    data_dir: &Path,
    out_forest: &Path,
    out_report: &Path,
) -> Result<ClassifyReport> {
    let art = load_artifact(artifact, checkpoint)?;
    let (mut fit_records, transform) = checkpoint_records(checkpoint, &split_path(data_dir, Split::Train)?)?;
    fit_records.extend(checkpoint_records(checkpoint, &split_path(data_dir, Split::Valid)?)?.0);
    let (test_records, _) = checkpoint_records(checkpoint, &split_path(data_dir, Split::Test)?)?;
    let fit_obs = observations(&fit_records, &transform, art.as_ref());
    let test_obs = observations(&test_records, &transform, art.as_ref());
    let (report, forest) = classify_observations(cfg, &fit_obs, &test_obs)?;
    forest.save(out_forest)?;
    write_json(&report, out_report)?;
    Ok(report)
}

/// Decision layer fit on `fit_obs` and scored on `test_obs` (raw units,
/// calibrated scales).
pub fn classify_observations(
    cfg: &RunConfig,
    fit_obs: &[Observation],
    test_obs: &[Observation],
) -> Result<(ClassifyReport, Forest)> {
    let t = cfg.classify.threshold;
    let entropy_feature = cfg.classify.entropy_feature;
    let fit_labels: Vec<bool> = fit_obs.iter().map(|o| o.target > t).collect();
    let test_labels: Vec<bool> = test_obs.iter().map(|o| o.target > t).collect();
    let forest = train_gbdt(&decision_features(&fit_obs, entropy_feature)?, &fit_labels, &cfg.classify.gbdt())?;
    let probs: Vec<f64> = decision_features(&test_obs, entropy_feature)?
        .iter()
        .map(|f| forest.predict_proba(f))
        .collect();
    let y_hat: Vec<f64> = test_obs.iter().map(|o| o.y_hat).collect();
    let report = ClassifyReport {
        threshold: t,
        entropy_feature,
        n_train: fit_obs.len(),
        n_test: test_obs.len(),
        baseline: classification_metrics(&y_hat, &test_labels, t)?,
        gbdt: classification_metrics(&probs, &test_labels, 0.5)?,
    };
    Ok((report, forest))
}

/// Filtering curve on the test split with entropy thresholds taken from the
/// calibrated validation predictions.
pub fn cmd_filter(
    cfg: &RunConfig,
    checkpoint: &Path,
    artifact: Option<&Path>,
    valid_path: &Path,
    test_path: &Path,
    out_csv: &Path,
) -> Result<Vec<FilterRow>> {
    let art = load_artifact(artifact, checkpoint)?;
    let (valid, transform) = checkpoint_records(checkpoint, valid_path)?;
    let valid = observations(&valid, &transform, art.as_ref());
    let (test, _) = checkpoint_records(checkpoint, test_path)?;
    let test = observations(&test, &transform, art.as_ref());
    let reference = filter::entropies(&valid.iter().map(|o| o.sigma).collect::<Vec<_>>())?;
    let rows = filter::filtering_curve(&test, &reference, &cfg.filter.q_grid)?;
    filter::write_curve_csv(&rows, out_csv)?;
    Ok(rows)
}

/// SHA-256 of every file under `root` (except the manifest itself), keyed by
/// `/`-separated relative path, written to `manifest.json`.
pub fn write_manifest(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = BTreeMap::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Config(format!("walking {}: {e}", root.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if key == MANIFEST_FILE {
            continue;
        }
        files.insert(key, sha256_file(entry.path())?);
    }
    let path = root.join(MANIFEST_FILE);
    write_json(&serde_json::json!({ "files": files }), &path)?;
    Ok(files)
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub paths: RunPaths,
    pub eval: EvalReport,
    pub classify: ClassifyReport,
    pub filter: Vec<FilterRow>,
    pub manifest: BTreeMap<String, String>,
}

/// Every stage in order inside `cfg.run_dir()`.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg.run_dir());
    create_dir(&paths.root)?;
    cfg.save(&paths.config())?;
    let data_dir = match &cfg.data_dir {
        Some(d) => d.clone(),
        None => {
            cmd_synth(cfg, &paths.data())?;
            paths.data()
        }
    };
    let ckpt = paths.checkpoint();
    cmd_train(cfg, &data_dir, &ckpt, &paths.history())?;
    let valid = split_path(&data_dir, Split::Valid)?;
    let test = split_path(&data_dir, Split::Test)?;
    let cal = paths.calibration();
    cmd_calibrate(cfg, &ckpt, &valid, &cal)?;
    let eval = cmd_eval(cfg, &ckpt, Some(&cal), &test, &paths.eval_json(), &paths.eval_table())?;
    let classify = cmd_classify(cfg, &ckpt, Some(&cal), &data_dir, &paths.forest(), &paths.classify())?;
    let filter = cmd_filter(cfg, &ckpt, Some(&cal), &valid, &test, &paths.filter_csv())?;
    let manifest = write_manifest(&paths.root)?;
    Ok(RunSummary {
        paths,
        eval,
        classify,
        filter,
        manifest,
    })
}
