use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the emotion label set.
pub const N_CLASSES: usize = 7;

/// How the text modality is represented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    /// Precomputed per-token embeddings of width `d_text`.
    Embeddings,
    /// Integer token ids below `vocab_size`, embedded by a learned table.
    Tokens,
}

/// Dimensions and hyperparameters shared by all three branches and the head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout_p: f64,
    pub d_img: usize,
    pub d_audio: usize,
    pub text_mode: TextMode,
    /// Embedding width in [`TextMode::Embeddings`]; ignored otherwise.
    pub d_text: usize,
    /// Vocabulary size in [`TextMode::Tokens`]; ignored otherwise.
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default = "default_layer_norm_eps")]
    pub layer_norm_eps: f64,
}

fn default_layer_norm_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            dropout_p: 0.0,
            d_img: 8,
            d_audio: 8,
            text_mode: TextMode::Embeddings,
            d_text: 8,
            vocab_size: 0,
            max_seq_len: 64,
            n_classes: N_CLASSES,
            layer_norm_eps: default_layer_norm_eps(),
        }
    }
}

impl ModelConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("d_img", self.d_img),
            ("d_audio", self.d_audio),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        match self.text_mode {
            TextMode::Embeddings if self.d_text == 0 => {
                return Err(Error::Config("d_text must be positive in embeddings mode".into()))
            }
            TextMode::Tokens if self.vocab_size == 0 => {
                return Err(Error::Config("vocab_size must be positive in tokens mode".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must be {N_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.layer_norm_eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config("layer_norm_eps must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn label_set_is_fixed() {
        let cfg = ModelConfig {
            n_classes: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
