use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::calib::DEFAULT_XI;
use crate::data::{SynthConfig, TransformKind};
use crate::error::{Error, Result};
use crate::filter::DEFAULT_Q_GRID;
use crate::gbdt::GbdtConfig;
use crate::json;
use crate::net::{Activation, Architecture, ConvBlock, TrainConfig, DEFAULT_EPS_SIGMA};

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "CALIREG_OUT_DIR";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub conv: Vec<ConvBlock>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub eps_sigma: f64,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv: vec![
                ConvBlock { channels: 8, kernel: 5 },
                ConvBlock { channels: 8, kernel: 5 },
            ],
            hidden: vec![32],
            activation: Activation::Relu,
            eps_sigma: DEFAULT_EPS_SIGMA,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, input_len: usize) -> Architecture {
        Architecture {
            input_len,
            conv: self.conv.clone(),
            hidden: self.hidden.clone(),
            activation: self.activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibSection {
    /// Bin width; `null` picks a hundredth of the value range.
    pub delta: Option<f64>,
    pub xi: f64,
}

impl Default for CalibSection {
    fn default() -> Self {
        CalibSection { delta: None, xi: DEFAULT_XI }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub alphas: Vec<f64>,
    /// Use `Phi^-1((1 + alpha) / 2)` half-widths instead of the default
    /// `C^-1(alpha) / 2` convention.
    pub standard_z: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            alphas: vec![0.8, 0.9, 0.95, 0.99],
            standard_z: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    /// Positive class is `raw target > threshold`.
    pub threshold: f64,
    pub n_trees: usize,
    pub max_depth: usize,
    pub nu: f64,
    pub min_leaf: usize,
    /// Add the predictive entropy as a third feature.
    pub entropy_feature: bool,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let g = GbdtConfig::default();
        ClassifySection {
            threshold: 2.0,
            n_trees: g.n_trees,
            max_depth: g.max_depth,
            nu: g.nu,
            min_leaf: g.min_leaf,
            entropy_feature: false,
        }
    }
}

impl ClassifySection {
    pub fn gbdt(&self) -> GbdtConfig {
        GbdtConfig {
            n_trees: self.n_trees,
            max_depth: self.max_depth,
            nu: self.nu,
            min_leaf: self.min_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub q_grid: Vec<f64>,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            q_grid: DEFAULT_Q_GRID.to_vec(),
        }
    }
}

/// Everything one pipeline run needs. Serialized as JSON; every field can be
/// overridden from the command line by its dotted path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: String,
    pub synth: SynthConfig,
    /// Existing dataset directory; when set, `synth` is not used.
    pub data_dir: Option<PathBuf>,
    pub transform: TransformKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub calib: CalibSection,
    pub eval: EvalSection,
    pub classify: ClassifySection,
    pub filter: FilterSection,
    /// Run directory; `null` means `$CALIREG_OUT_DIR/<task>` (or `runs/<task>`).
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "synthetic".into(),
            synth: SynthConfig {
                n_samples: 20_000,
                series_len: 32,
                skew: 0.8,
                noise_sd: 0.5,
                hetero: 1.0,
                noise_jitter: 1.0,
                seed: 0,
            },
            data_dir: None,
            transform: TransformKind::Standardize,
            model: ModelConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                bandwidth: 0.3,
                ..TrainConfig::default()
            },
            calib: CalibSection::default(),
            eval: EvalSection::default(),
            classify: ClassifySection::default(),
            filter: FilterSection::default(),
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = json::to_canonical_string(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_dir.is_none() {
            self.synth.validate()?;
        }
        self.train.validate()?;
        self.classify.gbdt().validate()?;
        if !(self.model.eps_sigma > 0.0) {
            return Err(Error::Config("model.eps_sigma must be > 0".into()));
        }
        if let Some(d) = self.calib.delta {
            if !(d > 0.0) {
                return Err(Error::Config(format!("calib.delta must be > 0, got {d}")));
            }
        }
        if !(self.calib.xi > 0.0 && self.calib.xi < 1.0) {
            return Err(Error::Config(format!("calib.xi must lie in (0, 1), got {}", self.calib.xi)));
        }
        if self.eval.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("eval.alphas must lie in (0, 1)".into()));
        }
        if self.filter.q_grid.iter().any(|q| !(*q > 0.0 && *q <= 1.0)) {
            return Err(Error::Config("filter.q_grid entries must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Sets the field at a dotted path (`train.lambda2`) from its textual
    /// value. The value is read as JSON when it parses as such, otherwise as a
    /// string.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
        *self = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("bad value for `{path}`: {e}")))?;
        Ok(())
    }

    /// Resolved run directory.
    pub fn run_dir(&self) -> PathBuf {
        match &self.out_dir {
            Some(d) => d.clone(),
            None => {
                let root = std::env::var_os(OUT_DIR_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
                root.join(&self.task)
            }
        }
    }
}
