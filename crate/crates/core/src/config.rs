//! Run configuration: one TOML file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_blobs, load_csv, BlobSpec, DataFiles, Dataset};
use crate::episodes::EpisodeConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::semantics::SemanticStore;
use crate::train::{GradcheckConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Blobs(BlobSpec),
    Files(DataFiles),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Blobs(BlobSpec::default())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub episode: EpisodeConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradcheckConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DataConfig::Files(files) = &mut cfg.data {
            let dir = path.parent().unwrap_or(Path::new("."));
            for p in [&mut files.features, &mut files.semantics, &mut files.split] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.loss.kind()?;
        self.train.adam.validate()?;
        if let DataConfig::Blobs(spec) = &self.data {
            spec.validate()?;
        }
        if self.model.widths.is_empty() || self.model.widths.contains(&0) {
            return Err(Error::Config(
                "model.widths must be nonempty and positive".into(),
            ));
        }
        Ok(())
    }

    /// Builds or loads the dataset. Blobs are generated from the run seed.
    pub fn load_data(&self) -> Result<(Dataset, SemanticStore)> {
        match &self.data {
            DataConfig::Blobs(spec) => generate_blobs(spec, self.seed),
            DataConfig::Files(files) => load_csv(files),
        }
    }
}
