//! Run manifests: enough to reproduce a run and check its inputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// Hashes the file at `path`.
pub fn file_entry(role: &str, path: &Path) -> Result<FileEntry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileEntry {
        role: role.into(),
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `train-gaze`, `train-policy`, `eval` or `gen-data`.
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_choice: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub param_count: Option<usize>,
    /// Parameter count of the transformer a baseline was matched against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_param_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    /// Reset seeds of the validation episodes, in split order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub val_episode_seeds: Vec<u64>,
    /// Final scalar metrics by name.
    #[serde(default)]
    pub metrics: std::collections::BTreeMap<String, f64>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
