use std::fs;
use std::path::Path;

use qme_core::nn::checkpoint::FORMAT_VERSION;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Envelope written around every JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub format_version: u32,
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub payload: T,
}

impl<T: Serialize> Artifact<T> {
    pub fn new(kind: &str, config_hash: &str, seed: u64, payload: T) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            payload,
        }
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Reads an artifact produced by an earlier stage and checks its version and config hash.
pub fn read_checked<T: DeserializeOwned>(path: &Path, config_hash: &str, stage: &str) -> CliResult<Artifact<T>> {
    if !path.exists() {
        return Err(CliError::StageOrderViolation(format!(
            "{} not found; run `{stage}` first",
            path.display()
        )));
    }
    let text = fs::read_to_string(path)?;
    let a: Artifact<T> = serde_json::from_str(&text)?;
    qme_core::nn::checkpoint::check_version(a.format_version)?;
    if a.config_hash != config_hash {
        return Err(CliError::ConfigDrift {
            artifact: path.display().to_string(),
            expected: config_hash.to_string(),
            found: a.config_hash,
        });
    }
    Ok(a)
}
