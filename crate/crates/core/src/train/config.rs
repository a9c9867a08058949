//! Training hyperparameters and the run-config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seeds the batch order. Parameter init is seeded by the model config.
    pub seed: u64,
    pub eval_interval: u64,
    /// Extra checkpoints every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: u64,
    /// Coefficient on the ablated-stream cross-entropy.
    pub ablated_loss_weight: f64,
    pub valid_fraction: f64,
    /// Validation windows scored per evaluation; 0 scores all of them.
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.4e-3,
            lr_min: 0.0,
            total_steps: 2000,
            batch_size: 16,
            seq_len: 128,
            weight_decay: 0.0,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            eval_interval: 100,
            checkpoint_interval: 0,
            ablated_loss_weight: 1.0,
            valid_fraction: 0.05,
            eval_windows: 64,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |path: &str, message: &str| {
            Err(Error::Config {
                path: format!("train.{path}"),
                message: message.into(),
            })
        };
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(0.0..=self.lr).contains(&self.lr_min) {
            return bad("lr_min", "must lie in [0, lr]");
        }
        if self.total_steps == 0 {
            return bad("total_steps", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.seq_len == 0 || self.seq_len > model.max_pos {
            return bad("seq_len", "must be positive and at most model.max_pos");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay", "must be non-negative");
        }
        if self.grad_clip < 0.0 {
            return bad("grad_clip", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", "must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if !(self.ablated_loss_weight >= 0.0) {
            return bad("ablated_loss_weight", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return bad("valid_fraction", "must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Training corpus, plain text or `.jsonl`. Relative paths resolve
    /// against the config file's directory.
    pub corpus: PathBuf,
}

/// A complete run description: `{"model": …, "train": …, "paths": …}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub paths: Paths,
}

fn config_error(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let mut path = e.path().to_string();
    let message = e.inner().to_string();
    // a missing field is reported against its parent; name the field itself
    if let Some(field) = message
        .strip_prefix("missing field `")
        .and_then(|rest| rest.split('`').next())
    {
        path = if path == "." {
            field.to_string()
        } else {
            format!("{path}.{field}")
        };
    }
    Error::Config { path, message }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if cfg.paths.corpus.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.paths.corpus = dir.join(&cfg.paths.corpus);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "d_mlp": 128,
                  "ablation_mode": "local", "k_attn": 1, "k_mlp": 4},
        "train": {"total_steps": 10, "seq_len": 32},
        "paths": {"corpus": "corpus.txt"}
    }"#;

    #[test]
    fn parses_with_defaults() {
        let c = RunConfig::from_json(GOOD).unwrap();
        assert_eq!(c.model.vocab_size, 257);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.total_steps, 10);
    }

    #[test]
    fn missing_key_is_named() {
        let text = GOOD.replace("\"d_model\": 32, ", "");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.d_model"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let text = GOOD.replace("\"total_steps\"", "\"total_stepz\"");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.total_stepz"),
            other => panic!("unexpected {other:?}"),
        }
        let text = GOOD.replace("\"seq_len\": 32", "\"seq_len\": 1000");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.seq_len"),
            other => panic!("unexpected {other:?}"),
        }
        let text = GOOD.replace("\"local\"", "\"sideways\"");
        match RunConfig::from_json(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.ablation_mode"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
