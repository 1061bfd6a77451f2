use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

use super::{Activation, MlpModel};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned on-disk form of an [`MlpModel`]. JSON floats are written with
/// shortest round-trip formatting, so loading reproduces every bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl From<&MlpModel> for Checkpoint {
    fn from(m: &MlpModel) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: m.layer_dims().to_vec(),
            activation: m.activation(),
            params: m.flat().to_vec(),
        }
    }
}

impl Checkpoint {
    pub fn into_model(self) -> Result<MlpModel> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        MlpModel::from_flat(&self.layer_dims, self.activation, self.params)
    }
}

/// Writes the checkpoint and returns the SHA-256 of the written bytes.
pub fn save_checkpoint(path: &Path, model: &MlpModel) -> Result<String> {
    util::write_json(path, &Checkpoint::from(model))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpModel> {
    util::read_json::<Checkpoint>(path)?.into_model()
}
