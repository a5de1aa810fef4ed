//! Synthetic imbalanced benchmark, target transforms, splitting and dataset files.
//!
//! A dataset on disk is a JSON-lines file (one sample per line) plus a shared
//! `header.json` in the same directory that records the series length, the
//! target transform and which file holds which split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::json;

pub const HEADER_FILE: &str = "header.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    pub id: String,
    pub series: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    fn from_stem(stem: &str) -> Option<Split> {
        match stem {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Identity,
    Standardize,
    LogStandardize,
}

/// Affine (optionally log-domain) map between raw targets and training space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    pub kind: TransformKind,
    pub mu: f64,
    pub sigma: f64,
}

impl TargetTransform {
    pub fn identity() -> Self {
        TargetTransform {
            kind: TransformKind::Identity,
            mu: 0.0,
            sigma: 1.0,
        }
    }

    pub fn new(kind: TransformKind, mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Error::Domain(format!(
                "transform needs finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(TargetTransform { kind, mu, sigma })
    }

    /// Fit mu/sigma on raw training targets. Population standard deviation is
    /// used; a constant target set falls back to sigma = 1.
    pub fn fit(kind: TransformKind, raw: &[f64]) -> Result<Self> {
        if kind == TransformKind::Identity {
            return Ok(Self::identity());
        }
        if raw.is_empty() {
            return Err(Error::Fit("cannot fit a transform on no targets".into()));
        }
        let values = raw
            .iter()
            .map(|&y| match kind {
                TransformKind::LogStandardize if y <= 0.0 => Err(Error::Domain(format!(
                    "log_standardize requires positive targets, got {y}"
                ))),
                TransformKind::LogStandardize => Ok(y.ln()),
                _ => Ok(y),
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let sigma = if var > 0.0 { var.sqrt() } else { 1.0 };
        Self::new(kind, mu, sigma)
    }

    pub fn apply(&self, y_raw: f64) -> Result<f64> {
        match self.kind {
            TransformKind::Identity => Ok(y_raw),
            TransformKind::Standardize => Ok((y_raw - self.mu) / self.sigma),
            TransformKind::LogStandardize => {
                if y_raw <= 0.0 {
                    return Err(Error::Domain(format!(
                        "log_standardize requires y > 0, got {y_raw}"
                    )));
                }
                Ok((y_raw.ln() - self.mu) / self.sigma)
            }
        }
    }

    pub fn invert(&self, y_t: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => y_t,
            TransformKind::Standardize => y_t * self.sigma + self.mu,
            TransformKind::LogStandardize => (y_t * self.sigma + self.mu).exp(),
        }
    }

    /// Converts a scale (standard deviation) in transformed units to raw units.
    /// Exact for the affine kinds; for log targets this is the local (delta-method)
    /// scale at the transformed location `y_t`.
    pub fn invert_scale(&self, y_t: f64, scale_t: f64) -> f64 {
        match self.kind {
            TransformKind::Identity => scale_t,
            TransformKind::Standardize => scale_t * self.sigma,
            TransformKind::LogStandardize => scale_t * self.sigma * self.invert(y_t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub series_len: usize,
    pub samples: Vec<TimeSeriesSample>,
    pub split: Split,
    pub transform: TargetTransform,
}

impl Dataset {
    pub fn new(
        series_len: usize,
        samples: Vec<TimeSeriesSample>,
        split: Split,
        transform: TargetTransform,
    ) -> Result<Self> {
        let ds = Dataset {
            series_len,
            samples,
            split,
            transform,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.target).collect()
    }

    /// Targets mapped back to raw units.
    pub fn raw_targets(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| self.transform.invert(s.target))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.series.len() != self.series_len {
                return Err(Error::Schema(format!(
                    "sample {} has series length {}, dataset declares {}",
                    s.id,
                    s.series.len(),
                    self.series_len
                )));
            }
            if !s.target.is_finite() {
                return Err(Error::Schema(format!("sample {} has a non-finite target", s.id)));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Schema(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Re-express targets under `transform`. Targets must currently be raw.
    pub fn with_transform(&self, transform: TargetTransform) -> Result<Dataset> {
        if self.transform.kind != TransformKind::Identity {
            return Err(Error::Config(
                "dataset targets are already transformed".into(),
            ));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                Ok(TimeSeriesSample {
                    id: s.id.clone(),
                    series: s.series.clone(),
                    target: transform.apply(s.target)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            series_len: self.series_len,
            samples,
            split: self.split,
            transform,
        })
    }
}

fn default_zero() -> f64 {
    0.0
}

/// Generator settings for the synthetic skewed-target benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub series_len: usize,
    /// Log-normal shape parameter of the target distribution.
    pub skew: f64,
    pub noise_sd: f64,
    /// Noise sd grows as `target^hetero`; 0 gives homoscedastic noise.
    #[serde(default = "default_zero")]
    pub hetero: f64,
    /// Log-normal spread of a per-sample noise multiplier that is visible in the
    /// series but independent of the target.
    #[serde(default = "default_zero")]
    pub noise_jitter: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if self.series_len < MIN_SERIES_LEN {
            return Err(Error::Config(format!(
                "series_len must be at least {MIN_SERIES_LEN}, got {}",
                self.series_len
            )));
        }
        if !(self.skew > 0.0 && self.skew.is_finite()) {
            return Err(Error::Config(format!("skew must be > 0, got {}", self.skew)));
        }
        for (name, v) in [
            ("noise_sd", self.noise_sd),
            ("hetero", self.hetero),
            ("noise_jitter", self.noise_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Deterministic part of the noise sd as a function of the raw target.
    pub fn noise_scale(&self, target: f64) -> f64 {
        self.noise_sd * target.powf(self.hetero)
    }
}

/// Shorter series cannot carry the sinusoidal amplitude component.
pub const MIN_SERIES_LEN: usize = 4;

/// Amplitude of the carrier component as a function of the raw target.
pub fn carrier_amplitude(target: f64) -> f64 {
    0.5 + 0.5 * target
}

/// Width (in samples) of the secondary pulse as a function of the raw target.
pub fn pulse_width(target: f64) -> f64 {
    1.0 + 2.0 * target / (1.0 + target)
}

/// Beat period used for a series of length `len`.
pub fn beat_period(len: usize) -> usize {
    if len % 2 == 0 && len >= 16 {
        len / 2
    } else {
        len
    }
}

/// Noise-free waveform for a raw target: a sinusoidal carrier of amplitude
/// `carrier_amplitude(y)` plus a periodic Gaussian pulse of width
/// `pulse_width(y)` centred where the carrier crosses zero.
pub fn clean_waveform(target: f64, len: usize) -> Vec<f64> {
    let period = beat_period(len);
    let center = period / 4;
    let amp = carrier_amplitude(target);
    let width = pulse_width(target);
    let half = period as i64 / 2;
    (0..len)
        .map(|t| {
            let offset = (t as i64 - center as i64).rem_euclid(period as i64);
            // wrap into [-period/2, period/2)
            let k = if offset >= period as i64 - half { offset - period as i64 } else { offset };
            let phase = 2.0 * std::f64::consts::PI * k as f64 / period as f64;
            amp * phase.sin() + (-(k * k) as f64 / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Draws the synthetic benchmark. Targets are log-normal with shape `skew`
/// (median 1), series are `clean_waveform(target)` plus Gaussian noise.
/// Returned as a single raw-target pool tagged `train`; use [`split_by_id`].
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let z: f64 = rng.sample(StandardNormal);
        let target = (cfg.skew * z).exp();
        let jitter: f64 = rng.sample(StandardNormal);
        let sd = cfg.noise_scale(target) * (cfg.noise_jitter * jitter).exp();
        let mut series = clean_waveform(target, cfg.series_len);
        for v in series.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += sd * e;
        }
        samples.push(TimeSeriesSample {
            id: format!("syn-{}-{:07}", cfg.seed, i),
            series,
            target,
        });
    }
    Dataset::new(cfg.series_len, samples, Split::Train, TargetTransform::identity())
}

/// Split proportions (train, valid); test receives the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            valid: 0.1,
        }
    }
}

fn id_unit(id: &str) -> f64 {
    let digest = Sha256::digest(id.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(head) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic split by a hash of each sample id.
pub fn split_by_id(ds: &Dataset, fractions: SplitFractions) -> Result<(Dataset, Dataset, Dataset)> {
    let SplitFractions { train, valid } = fractions;
    if !(train > 0.0 && valid >= 0.0 && train + valid <= 1.0) {
        return Err(Error::Config(format!(
            "invalid split fractions train={train}, valid={valid}"
        )));
    }
    let mut parts: [Vec<TimeSeriesSample>; 3] = Default::default();
    for s in &ds.samples {
        let u = id_unit(&s.id);
        let slot = if u < train {
            0
        } else if u < train + valid {
            1
        } else {
            2
        };
        parts[slot].push(s.clone());
    }
    let [tr, va, te] = parts;
    let make = |samples, split| Dataset {
        series_len: ds.series_len,
        samples,
        split,
        transform: ds.transform,
    };
    Ok((make(tr, Split::Train), make(va, Split::Valid), make(te, Split::Test)))
}

/// Split a raw pool, fit the transform on the training part only and apply it
/// to all three parts.
pub fn prepare_splits(
    pool: &Dataset,
    kind: TransformKind,
    fractions: SplitFractions,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (train, valid, test) = split_by_id(pool, fractions)?;
    let transform = TargetTransform::fit(kind, &train.targets())?;
    Ok((
        train.with_transform(transform)?,
        valid.with_transform(transform)?,
        test.with_transform(transform)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    #[serde(rename = "L")]
    pub series_len: usize,
    pub transform: TargetTransform,
    /// Split name → JSONL file name (relative to the header's directory).
    pub split: BTreeMap<Split, String>,
}

fn header_path(data_path: &Path) -> PathBuf {
    data_path
        .parent()
        .map(|p| p.join(HEADER_FILE))
        .unwrap_or_else(|| PathBuf::from(HEADER_FILE))
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Config(format!("not a file path: {}", path.display())))
}

pub fn read_header(path: &Path) -> Result<DatasetHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn write_header(path: &Path, header: &DatasetHeader) -> Result<()> {
    let mut text = json::to_canonical_string(header)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_samples(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for s in &ds.samples {
        let line = json::to_canonical_string(s)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Writes the samples to `path` and records the split in the directory's
/// `header.json`, which must agree on series length and transform if present.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let hpath = header_path(path);
    let mut header = if hpath.exists() {
        let h = read_header(&hpath)?;
        if h.series_len != ds.series_len || h.transform != ds.transform {
            return Err(Error::Schema(format!(
                "{} describes a different dataset (L or transform differ)",
                hpath.display()
            )));
        }
        h
    } else {
        DatasetHeader {
            series_len: ds.series_len,
            transform: ds.transform,
            split: BTreeMap::new(),
        }
    };
    header.split.insert(ds.split, file_name(path)?);
    write_samples(ds, path)?;
    write_header(&hpath, &header)
}

/// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and a fresh `header.json`
/// into `dir`.
pub fn save_splits(dir: &Path, train: &Dataset, valid: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut header = DatasetHeader {
        series_len: train.series_len,
        transform: train.transform,
        split: BTreeMap::new(),
    };
    for ds in [train, valid, test] {
        ds.validate()?;
        if ds.series_len != header.series_len || ds.transform != header.transform {
            return Err(Error::Schema("splits disagree on L or transform".into()));
        }
        let name = format!("{}.jsonl", ds.split.as_str());
        write_samples(ds, &dir.join(&name))?;
        header.split.insert(ds.split, name);
    }
    write_header(&dir.join(HEADER_FILE), &header)
}

/// Loads a JSONL dataset. Series length, split and transform come from the
/// sibling `header.json`; without one they are inferred from the first line,
/// the file stem and the identity transform respectively.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let hpath = header_path(path);
    let name = file_name(path)?;
    let header = if hpath.exists() { Some(read_header(&hpath)?) } else { None };

    let (mut series_len, split, transform) = match &header {
        Some(h) => {
            let split = h
                .split
                .iter()
                .find(|(_, f)| **f == name)
                .map(|(s, _)| *s)
                .ok_or_else(|| {
                    Error::Schema(format!("{} does not list {name}", hpath.display()))
                })?;
            (Some(h.series_len), split, h.transform)
        }
        None => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            (None, Split::from_stem(stem).unwrap_or(Split::Train), TargetTransform::identity())
        }
    };

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TimeSeriesSample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let expected = *series_len.get_or_insert(sample.series.len());
        if sample.series.len() != expected {
            return Err(Error::Schema(format!(
                "{}: line {}: series length {} does not match declared L = {expected}",
                path.display(),
                i + 1,
                sample.series.len()
            )));
        }
        samples.push(sample);
    }
    Dataset::new(series_len.unwrap_or(0), samples, split, transform)
}

/// Sample skewness (third standardized moment, population form).
pub fn sample_skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}
