//! The single JSON configuration file shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::eval::EvalConfig;
use crate::model::ModelConfig;
use crate::train::{DataConfig, TrainConfig, TrainSetup};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub schema_version: u32,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl GlobalConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::ConfigNotFound(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..=1.0).contains(&self.data.confidence_threshold) {
            return Err(Error::Config("data.confidence_threshold must be in [0, 1]".into()));
        }
        if self.data.num_frames != self.model.num_frames {
            return Err(Error::Config("data.num_frames must equal model.num_frames".into()));
        }
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
            augment: self.augment.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = GlobalConfig::default();
        c.validate().unwrap();
        assert_eq!(GlobalConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(GlobalConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_versions() {
        assert!(GlobalConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(GlobalConfig::from_json(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(GlobalConfig::from_json(r#"{"schema_version": 9}"#).is_err());
        assert!(matches!(
            GlobalConfig::load(Path::new("/nonexistent/missing.json")),
            Err(Error::ConfigNotFound(_))
        ));
    }
}
