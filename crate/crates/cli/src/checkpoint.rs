//! Training checkpoints: the environment spec plus the full trainer state,
//! including replay buffer and RNG.

use std::path::Path;
use std::sync::Arc;

use afn_core::model::AnyModel;
use afn_core::selfplay::{TbState, TreeState};
use serde::{Deserialize, Serialize};

use crate::config::{EnvConfig, SCHEMA_VERSION};
use crate::{write_atomic, CliError};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainerState {
    Tb(TbState),
    Tree(TreeState),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub env: EnvConfig,
    pub trainer: TrainerState,
}

impl Checkpoint {
    pub fn new(env: EnvConfig, trainer: TrainerState) -> Self {
        Checkpoint { version: SCHEMA_VERSION, env, trainer }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let c: Checkpoint = serde_json::from_slice(&text)
            .map_err(|e| CliError { path: Some(path.display().to_string()), ..CliError::new("checkpoint", e.to_string()) })?;
        if c.version != SCHEMA_VERSION {
            return Err(CliError::new("checkpoint", format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)
    }

    pub fn step(&self) -> u64 {
        match &self.trainer {
            TrainerState::Tb(s) => s.step,
            TrainerState::Tree(s) => s.step,
        }
    }

    /// The playable policy model, for trajectory-balance checkpoints.
    pub fn policy_model(&self) -> Option<Arc<AnyModel>> {
        match &self.trainer {
            TrainerState::Tb(s) => Some(Arc::new(s.model.clone())),
            TrainerState::Tree(_) => None,
        }
    }
}
