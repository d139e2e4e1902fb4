//! JSON checkpoint container: `{format, version, spec, params}`.
//!
//! Floats are written in shortest round-trip form, so a model built from a
//! fixed seed always serializes to the same bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, NetworkSpec, ParamSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fednorm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: NetworkSpec,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn of(model: &Model) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            params: model.params().clone(),
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = Model::build_unchecked(self.spec, 0)?;
        model.set_params(self.params)?;
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&Checkpoint::of(model))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_model()
}
