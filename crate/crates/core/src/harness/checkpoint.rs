//! JSON checkpoints of a finished (or paused) run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::experiment::TrainState;
use crate::error::{Error, Result};
use crate::stream::Standardizer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ExperimentConfig,
    pub state: TrainState,
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, state: TrainState, standardizer: Option<Standardizer>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config,
            state,
            standardizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: checkpoint version {} is not supported",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
