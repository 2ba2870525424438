//! Harness configuration (TOML).
//!
//! Every field has a default, so an empty file is a valid configuration.
//! Relative artifact paths are resolved against the output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::SteeringSchedule;
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, TrainConfig};
use crate::pid::PidGains;
use crate::plant::PlantConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub out_dir: PathBuf,
    pub dataset: PathBuf,
    pub heldout: PathBuf,
    pub model: PathBuf,
    pub vector: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            out_dir: PathBuf::from("out"),
            dataset: PathBuf::from("dataset.csv"),
            heldout: PathBuf::from("heldout.csv"),
            model: PathBuf::from("classifier.model"),
            vector: PathBuf::from("control.vec"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    /// Master seed; episode and dataset seeds are derived from it.
    pub seed: u64,
    pub n_train_chunks: usize,
    pub n_episodes: usize,
    /// Layer the features are read from and steering is applied at.
    pub feature_layer: usize,
    /// Rescale the control vector to unit length after extraction.
    pub normalize_vector: bool,
    pub plant: PlantConfig,
    pub gains: PidGains,
    pub schedule: SteeringSchedule,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            seed: 42,
            n_train_chunks: 100,
            n_episodes: 200,
            feature_layer: 20,
            normalize_vector: false,
            plant: PlantConfig::default(),
            gains: PidGains::default(),
            schedule: SteeringSchedule::default(),
            train: TrainConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl HarnessConfig {
    pub fn from_toml(path: &Path, text: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            Error::format(path, line, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(path, &text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invariant(format!("config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.gains.validate()?;
        self.schedule.validate()?;
        self.train.validate()?;
        if self.n_train_chunks < 2 {
            return Err(Error::invalid("config", "n_train_chunks must be >= 2"));
        }
        if self.n_episodes == 0 {
            return Err(Error::invalid("config", "n_episodes must be >= 1"));
        }
        Ok(())
    }

    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout {
            feature_layer: self.feature_layer,
            chunk_size: self.plant.chunk_size,
        }
    }

    /// Short SHA-256 of the configuration, ignoring the output directory so
    /// the same run written to two places hashes the same.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.paths.out_dir = PathBuf::new();
        let digest = Sha256::digest(canonical.to_toml()?.as_bytes());
        Ok(hex::encode(&digest[..8]))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.paths.out_dir.join(path)
        }
    }
}
