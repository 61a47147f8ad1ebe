//! Command-line runs and the HTTP play service for adversarial flow
//! networks.

use std::fmt;
use std::path::Path;

use afn_core::env::EnvError;
use afn_core::eval::EvalError;
use afn_core::exact::ExactError;
use afn_core::model::ModelError;
use afn_core::selfplay::TrainError;
use afn_core::tree::TreeError;
use serde::Serialize;

pub mod agents;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod serve;

/// A failure reported as one JSON record on stderr.
#[derive(Debug, Clone, Serialize)]
pub struct CliError {
    pub code: String,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl CliError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        CliError { code: code.into(), message: message.into(), key: None, path: None }
    }

    pub fn config(key: &str, message: &str) -> Self {
        CliError { key: Some(key.into()), ..Self::new("config", message) }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError { path: Some(path.display().to_string()), ..Self::new("io", e.to_string()) }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self.code.as_str() {
            "config" => 2,
            "check_failed" => 3,
            _ => 1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)?;
        if let Some(k) = &self.key {
            write!(f, " (key `{k}`)")?;
        }
        Ok(())
    }
}

impl std::error::Error for CliError {}

macro_rules! error_from {
    ($($t:ty => $code:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new($code, e.to_string())
            }
        })*
    };
}

error_from! {
    EnvError => "env",
    EvalError => "eval",
    ExactError => "exact",
    ModelError => "model",
    TreeError => "tree",
    serde_json::Error => "json",
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::config("train", &m),
            e => CliError::new("train", e.to_string()),
        }
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename, so a
/// crash never leaves a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}
