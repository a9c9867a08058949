use serde::{Deserialize, Serialize};

use crate::data::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Where gate scores come from during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationMode {
    /// No gates; the ablated stream is the clean stream.
    #[default]
    None,
    /// Each block scores its own units from the ablated stream entering it.
    Local,
    /// All blocks are scored from the clean pass's final hidden state.
    Global,
}

impl AblationMode {
    pub fn has_gates(self) -> bool {
        self != AblationMode::None
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationMode::None => "none",
            AblationMode::Local => "local",
            AblationMode::Global => "global",
        })
    }
}

fn default_vocab() -> usize {
    VOCAB_SIZE
}

fn default_max_pos() -> usize {
    256
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    #[serde(default = "default_max_pos")]
    pub max_pos: usize,
    #[serde(default)]
    pub ablation_mode: AblationMode,
    pub k_attn: usize,
    pub k_mlp: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Two-layer, width-64 model used for desk-scale experiments.
    pub fn desk(ablation_mode: AblationMode, k: usize) -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_mlp: 256,
            max_pos: 256,
            ablation_mode,
            k_attn: k,
            k_mlp: k,
            seed: 0,
        }
    }

    /// TinyStories-3M-sized configuration (8 blocks, width 128, 16 heads).
    pub fn reference(ablation_mode: AblationMode, k: usize) -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 8,
            n_heads: 16,
            d_mlp: 512,
            max_pos: 256,
            ablation_mode,
            k_attn: k,
            k_mlp: k,
            seed: 0,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("model.{path}"),
                message,
            })
        };
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("max_pos", self.max_pos),
            ("k_attn", self.k_attn),
            ("k_mlp", self.k_mlp),
        ] {
            if v == 0 {
                return bad(name, "must be positive".into());
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(
                "n_heads",
                format!(
                    "d_model {} is not divisible by n_heads {}",
                    self.d_model, self.n_heads
                ),
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_divisibility_is_checked() {
        let mut c = ModelConfig::desk(AblationMode::Local, 2);
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "model.n_heads"));
    }

    #[test]
    fn mode_serializes_lowercase() {
        let c = ModelConfig::desk(AblationMode::Global, 1);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"ablation_mode\":\"global\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
