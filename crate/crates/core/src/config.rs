//! Run configuration: a TOML file with `[model]`, `[train]` and `[data]` sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "CTCSEQ_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub mel_weight: f64,
    pub flip_prob: f64,
    pub beam_width: usize,
    pub lm_alpha: f64,
    pub lm_order: usize,
    pub lm_smoothing: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            mel_weight: 0.1,
            flip_prob: 0.3,
            beam_width: 20,
            lm_alpha: 0.2,
            lm_order: 3,
            lm_smoothing: 0.1,
            seed: 0,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train.{m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail("lr must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("flip_prob must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.mel_weight) {
            return fail("mel_weight must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lm_alpha) {
            return fail("lm_alpha must be in [0, 1]");
        }
        if self.beam_width == 0 || self.batch_size == 0 || self.lm_order == 0 {
            return fail("beam_width, batch_size and lm_order must be >= 1");
        }
        if self.lm_smoothing.is_nan() || self.lm_smoothing <= 0.0 {
            return fail("lm_smoothing must be > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("beta1 and beta2 must be in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("epsilon must be > 0, weight_decay and grad_clip >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads the file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// The fully resolved configuration, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("[train]\nepochs = 3\n[model]\nembed_dim = 16\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, 1e-4);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.data, GenConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = 1.0\n").is_err());
        assert!(RunConfig::from_toml_str("[optim]\n").is_err());
    }

    #[test]
    fn resolved_echo_roundtrips() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert!(text.contains("[train]") && text.contains("[model]") && text.contains("[data]"));
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn train_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { flip_prob: 1.5, ..ok.clone() },
            TrainConfig { mel_weight: -0.1, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { lr: f64::NAN, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
