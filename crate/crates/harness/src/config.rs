//! Experiment files: a model configuration plus a training configuration.

use std::fs;
use std::path::Path;

use sbattn::{AttentionSpec, Mechanism, ModelConfig, Placement};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::train::{Schedule, TrainConfig};

pub const PRESETS: [&str; 3] = ["imagenet-paper", "cifar-paper", "desk"];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let sb = AttentionSpec::new(Mechanism::Sb);
        match name {
            // Full ImageNet recipe; no ImageNet loader ships, so this preset
            // only drives cost reports.
            "imagenet-paper" => Ok(Self {
                model: ModelConfig::imagenet(1.0).with_attention(sb, Placement::all()),
                train: TrainConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    weight_decay: 4e-5,
                    batch_size: 256,
                    epochs: 300,
                    schedule: Schedule::Linear,
                    augment: true,
                    ..TrainConfig::default()
                },
            }),
            "cifar-paper" => Ok(Self {
                model: ModelConfig::cifar(1.0).with_attention(sb, Placement::all()),
                train: TrainConfig {
                    lr0: 0.1,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 128,
                    epochs: 200,
                    schedule: Schedule::Cosine,
                    augment: true,
                    ..TrainConfig::default()
                },
            }),
            "desk" => Ok(Self {
                model: ModelConfig::toy().with_attention(sb, Placement::all()),
                train: TrainConfig {
                    lr0: 0.05,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 128,
                    epochs: 10,
                    schedule: Schedule::Cosine,
                    subset_size: Some(2000),
                    test_subset: Some(1000),
                    augment: false,
                    ..TrainConfig::default()
                },
            }),
            other => {
                Err(HarnessError::Config(format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", "))))
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config()?.validate()?;
        Ok(())
    }

    /// The model configuration with the training-side attention dropout
    /// applied.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        let (ours, theirs) = (self.train.attention_dropout, model.attention.dropout);
        if ours > 0.0 && theirs > 0.0 && ours != theirs {
            return Err(HarnessError::Config(format!(
                "attention dropout given twice with different rates ({ours} and {theirs})"
            )));
        }
        if ours > 0.0 {
            model.attention.dropout = ours;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_and_validate() {
        for name in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            cfg.validate().unwrap();
            let text = serde_json::to_string_pretty(&cfg).unwrap();
            assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        }
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"optimizer": "adam"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"model": {"width": 1.0}}"#).is_err());
    }
}
