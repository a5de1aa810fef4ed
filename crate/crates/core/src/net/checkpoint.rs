use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, RegressorModel};
use crate::data::TargetTransform;
use crate::error::{Error, Result};
use crate::json;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// On-disk model: architecture, flat parameters and the target transform the
/// model was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    pub params: Vec<f64>,
    pub eps_sigma: f64,
    pub seed: u64,
    pub transform: TargetTransform,
}

impl Checkpoint {
    pub fn new(model: &RegressorModel, transform: TargetTransform) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: model.architecture().clone(),
            params: model.params().to_vec(),
            eps_sigma: model.eps_sigma(),
            seed: model.seed(),
            transform,
        }
    }

    pub fn into_model(self) -> Result<(RegressorModel, TargetTransform)> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported checkpoint format_version {}",
                self.format_version
            )));
        }
        let model = RegressorModel::from_parts(self.architecture, self.params, self.eps_sigma, self.seed)?;
        Ok((model, self.transform))
    }
}

pub fn save_checkpoint(model: &RegressorModel, transform: TargetTransform, path: &Path) -> Result<()> {
    let mut text = json::to_canonical_string(&Checkpoint::new(model, transform))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(RegressorModel, TargetTransform)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_owned(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    ckpt.into_model()
}
