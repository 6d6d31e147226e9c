use std::path::{Path, PathBuf};

use hifi_core::hifidit::ModelConfig;
use hifi_core::trainer::TrainConfig;
use hifi_core::{HifiError, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training manifest, relative to the config file.
    pub manifest: Option<PathBuf>,
}

/// Versioned run description: model, optimization and data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| HifiError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(HifiError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HifiError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(m), Some(dir)) = (cfg.data.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_is_required_and_unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"model": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"version": 2}"#).is_err());
        assert!(RunConfig::parse(r#"{"version": 1, "extra": 0}"#).is_err());
        assert!(RunConfig::parse(r#"{"version": 1, "train": {"lrr": 1}}"#).is_err());
        let cfg = RunConfig::parse(r#"{"version": 1, "train": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.model, ModelConfig::default());
        let text = serde_json::to_string(&RunConfig::default()).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), RunConfig::default());
    }
}
