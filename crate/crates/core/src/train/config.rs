use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamParams;
use super::math::check_epsilon;
use crate::error::{Error, Result};
use crate::model::DEFAULT_DROPOUT;

/// Training hyperparameters. The TOML keys are the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub label_smoothing: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamParams::default();
        Self {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 50,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            label_smoothing: 0.0,
            dropout_rate: DEFAULT_DROPOUT,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for small synthetic datasets: lr 1e-3, batch 32, 5 epochs.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!(
                "Adam decays ({}, {}) must lie in [0, 1)",
                self.beta1, self.beta2
            ));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return bad(format!("adam_epsilon {} must be positive", self.adam_epsilon));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        check_epsilon(self.label_smoothing)
            .map_err(|_| Error::Config(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)))
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }
}
