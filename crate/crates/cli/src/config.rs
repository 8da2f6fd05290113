//! Run configuration. Missing keys in a config file take the built-in
//! defaults; command-line flags are applied on top.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use strokeseg::nets::ModelConfig;
use strokeseg::phantom::PhantomSpec;
use strokeseg::preprocess::PreprocessConfig;
use strokeseg::train::TrainConfig;
use strokeseg::volume_io::{Split, SplitRatios};

/// Resolved configuration of the run, as stored in `config.json` of the run directory.
pub const RUN_CONFIG_FILE: &str = "config.json";
/// Copy of the split manifest used by the run.
pub const RUN_MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub threshold: f64,
    pub split: Split,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            split: Split::Test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of the case directories. The only setting without a default.
    pub dataset_root: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    /// Output root of `preprocess`; when unset, training preprocesses in memory.
    pub samples_dir: Option<PathBuf>,
    /// Seed of the case split.
    pub seed: u64,
    pub split: SplitRatios,
    pub phantom: PhantomSpec,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    /// Keeps the model and preprocessing slice counts in step; the model
    /// setting wins because it is fixed by any checkpoint.
    pub fn sync_slices(&mut self) {
        self.preprocess.slices_per_modality = self.model.slices_per_modality;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "train": {"epochs": 3}}"#).unwrap();
        let c = RunConfig::from_file(&path).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_top_level_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sede": 9}"#).unwrap();
        assert!(RunConfig::from_file(&path).is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig {
            dataset_root: Some("d".into()),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
