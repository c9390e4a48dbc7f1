use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::config::Resolved;
use crate::error::{CliError, Result};

/// What a command ran with and what it wrote. Contains no timestamps, so
/// identical runs produce identical manifests.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub config: Resolved,
    pub seed: u64,
    pub data_dir: String,
    /// SHA-256 of the checkpoint the command wrote or read.
    pub checkpoint_sha256: Option<String>,
    pub outputs: Vec<String>,
    pub results: Value,
}

impl Manifest {
    pub fn new(command: &str, config: &Resolved, data_dir: &Path) -> Self {
        Manifest {
            command: command.into(),
            seed: config.train.seed,
            config: config.clone(),
            data_dir: data_dir.display().to_string(),
            checkpoint_sha256: None,
            outputs: Vec::new(),
            results: Value::Null,
        }
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes `<out_dir>/<command>.manifest.json` and returns its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
