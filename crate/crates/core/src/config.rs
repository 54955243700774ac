//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inject::InjectionPlan;
use crate::stream::{NodeIds, SplitSpec, StreamFormat};
use crate::toy::ToyConfig;
use crate::trainer::{ModelConfig, TrainingConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    File {
        path: PathBuf,
        format: StreamFormat,
        #[serde(default)]
        node_ids: NodeIds,
        /// Zero-feature width for files without feature columns.
        #[serde(default)]
        feature_dim: usize,
    },
    Toy(ToyConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub split: SplitSpec,
    /// No injection when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injection: Option<InjectionPlan>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.split.validate()?;
        if let Some(p) = &self.injection {
            p.validate()?;
        }
        if let DataSource::Toy(t) = &self.data {
            t.validate()?;
        }
        self.model.validate()?;
        self.training.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// The end-to-end toy experiment: 1% anomalies (half T, half S) injected
    /// into the test split only, trained without labels.
    pub fn toy(output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            output_dir: output_dir.into(),
            data: DataSource::Toy(ToyConfig::default()),
            split: SplitSpec::default(),
            injection: Some(InjectionPlan {
                train_rate_t: 0.0,
                val_rate_t: 0.0,
                test_rate_t: 0.005,
                test_rate_s: 0.005,
                seed: 1,
            }),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
        }
    }
}
