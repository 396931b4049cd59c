//! Flat key/value run configuration (TOML syntax, one level deep).
//!
//! Every key has a default, so a config file only lists overrides. The
//! documented schema:
//!
//! ```text
//! # model
//! hidden = 64            # hidden size h
//! layers = 2             # encoder blocks
//! heads = 4              # attention heads (must divide hidden)
//! interaction = 3        # prompt interaction layers I
//! prompts = 12           # prompt count M
//! max_len = 256          # encoder maximum sequence length
//! template = "default"   # "default" | "hard" | "soft"
//! # training
//! epochs = 30
//! batch_size = 8
//! peak_lr = 0.001
//! warmup_frac = 0.1
//! lambda1 = 1.0          # typing loss weight
//! lambda2 = 2.0          # locating loss weight
//! seed = 0
//! mode = "full"          # "full" | "locate_only"
//! freeze_encoder = false
//! # ablation switches
//! matching = "dynamic"   # "dynamic" | "static"
//! label_expansion = true # one-to-many matching; false = one-to-one
//! prompt_agnostic_mask = true
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::template::TemplateKind;
use crate::train::{MatchingMode, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for {key}: {value:?} (expected one of {expected})")]
    BadValue {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub interaction: usize,
    pub prompts: usize,
    pub max_len: usize,
    pub template: String,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub mode: String,
    pub freeze_encoder: bool,
    // ablation switches
    pub matching: String,
    pub label_expansion: bool,
    pub prompt_agnostic_mask: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 64,
            layers: 2,
            heads: 4,
            interaction: 3,
            prompts: 12,
            max_len: 256,
            template: "default".into(),
            epochs: 30,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup_frac: 0.1,
            lambda1: 1.0,
            lambda2: 2.0,
            seed: 0,
            mode: "full".into(),
            freeze_encoder: false,
            matching: "dynamic".into(),
            label_expansion: true,
            prompt_agnostic_mask: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.template_kind()?;
        cfg.train_mode()?;
        cfg.matching_mode()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let path = path.as_ref();
        let text = toml::to_string(self).expect("config serializes");
        std::fs::write(path, text).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn template_kind(&self) -> Result<TemplateKind, ConfigError> {
        TemplateKind::parse(&self.template).ok_or(ConfigError::BadValue {
            key: "template",
            value: self.template.clone(),
            expected: "default | hard | soft",
        })
    }

    pub fn train_mode(&self) -> Result<TrainMode, ConfigError> {
        match self.mode.as_str() {
            "full" => Ok(TrainMode::Full),
            "locate_only" => Ok(TrainMode::LocateOnly),
            other => Err(ConfigError::BadValue {
                key: "mode",
                value: other.to_string(),
                expected: "full | locate_only",
            }),
        }
    }

    pub fn matching_mode(&self) -> Result<MatchingMode, ConfigError> {
        match self.matching.as_str() {
            "dynamic" => Ok(MatchingMode::Dynamic),
            "static" => Ok(MatchingMode::Static),
            other => Err(ConfigError::BadValue {
                key: "matching",
                value: other.to_string(),
                expected: "dynamic | static",
            }),
        }
    }

    /// Model hyperparameters; the type count comes from the corpus header.
    pub fn model_config(&self, types: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            interaction: self.interaction,
            prompts: self.prompts,
            types,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_frac: self.warmup_frac,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            seed: self.seed,
            mode: self.train_mode()?,
            freeze_encoder: self.freeze_encoder,
            matching: self.matching_mode()?,
            label_expansion: self.label_expansion,
            use_mask: self.prompt_agnostic_mask,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_an_empty_config() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.lambda1, 1.0);
        assert_eq!(cfg.lambda2, 2.0);
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::parse("prompts = 50\ntemplate = \"hard\"\npeak_lr = 2e-5\n").unwrap();
        assert_eq!(cfg.prompts, 50);
        assert_eq!(cfg.template_kind().unwrap(), TemplateKind::Hard);
        assert_eq!(cfg.peak_lr, 2e-5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("no_such_key = 1\n").is_err());
    }

    #[test]
    fn bad_enum_values_are_rejected() {
        assert!(RunConfig::parse("template = \"fuzzy\"\n").is_err());
        assert!(RunConfig::parse("matching = \"magic\"\n").is_err());
        assert!(RunConfig::parse("mode = \"half\"\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.epochs = 7;
        cfg.matching = "static".into();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        cfg.save(&path).unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }
}
