use std::path::{Path, PathBuf};

use qme_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Top-level JSON configuration. Omitted fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Existing dataset directory; when unset the dataset lives under `<out>/dataset`.
    pub dataset_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<RunConfig>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.experiment = cfg.experiment.with_seed(s);
        }
        cfg.experiment.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn seed(&self) -> u64 {
        self.experiment.synth.seed
    }

    /// SHA-256 of the canonical (sorted-key) JSON form of the effective config.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"fusion": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.experiment.fusion.epochs, 3);
        assert_eq!(cfg.experiment.fusion.experts, 2);
        assert_eq!(cfg.experiment.synth, ExperimentConfig::default().synth);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.experiment = b.experiment.with_seed(7);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
