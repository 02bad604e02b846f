use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::ModelError;

/// Architecture and regularization sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub heads: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub activation_dropout: f64,
    pub layer_drop: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
    pub vocab_size: usize,
}

impl ModelConfig {
    /// Single-language model: 3 encoder and 3 decoder layers.
    pub fn monolingual(vocab_size: usize) -> Self {
        Self {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 256,
            d_ffn: 64,
            heads: 4,
            dropout: 0.15,
            attention_dropout: 0.1,
            activation_dropout: 0.35,
            layer_drop: 0.2,
            max_source_len: 96,
            max_target_len: 96,
            vocab_size,
        }
    }

    /// Joint model over all languages: 4 encoder and 4 decoder layers.
    pub fn multilingual(vocab_size: usize) -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 4,
            ..Self::monolingual(vocab_size)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_ffn == 0 || self.vocab_size < 4 {
            return bad("d_ffn must be positive and vocab_size at least 4".into());
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
            ("activation_dropout", self.activation_dropout),
            ("layer_drop", self.layer_drop),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.max_source_len == 0 || self.max_target_len == 0 {
            return bad("maximum lengths must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, the config block of a checkpoint.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "enc_layers={}", self.enc_layers);
        let _ = writeln!(s, "dec_layers={}", self.dec_layers);
        let _ = writeln!(s, "d_model={}", self.d_model);
        let _ = writeln!(s, "d_ffn={}", self.d_ffn);
        let _ = writeln!(s, "heads={}", self.heads);
        let _ = writeln!(s, "dropout={}", self.dropout);
        let _ = writeln!(s, "attention_dropout={}", self.attention_dropout);
        let _ = writeln!(s, "activation_dropout={}", self.activation_dropout);
        let _ = writeln!(s, "layer_drop={}", self.layer_drop);
        let _ = writeln!(s, "max_source_len={}", self.max_source_len);
        let _ = writeln!(s, "max_target_len={}", self.max_target_len);
        let _ = writeln!(s, "vocab_size={}", self.vocab_size);
        s
    }

    pub fn from_key_values(text: &str) -> Result<Self, ModelError> {
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let get = |k: &str| -> Result<&str, ModelError> {
            kv.get(k)
                .copied()
                .ok_or_else(|| ModelError::InvalidConfig(format!("missing {k}")))
        };
        let int = |k: &str| -> Result<usize, ModelError> {
            get(k)?.parse().map_err(|_| ModelError::InvalidConfig(format!("bad {k}")))
        };
        let real = |k: &str| -> Result<f64, ModelError> {
            get(k)?.parse().map_err(|_| ModelError::InvalidConfig(format!("bad {k}")))
        };
        let cfg = Self {
            enc_layers: int("enc_layers")?,
            dec_layers: int("dec_layers")?,
            d_model: int("d_model")?,
            d_ffn: int("d_ffn")?,
            heads: int("heads")?,
            dropout: real("dropout")?,
            attention_dropout: real("attention_dropout")?,
            activation_dropout: real("activation_dropout")?,
            layer_drop: real("layer_drop")?,
            max_source_len: int("max_source_len")?,
            max_target_len: int("max_target_len")?,
            vocab_size: int("vocab_size")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Trainable parameter count of the architecture.
///
/// Embedding `V*d` (shared with the output projection), per attention block
/// four `d*d` matrices with biases, per feed-forward block `d*f + f + f*d + d`,
/// two layer-norm vectors per norm. Encoder layers hold two norms, decoder
/// layers three, plus one final norm on each side.
pub fn count_params(config: &ModelConfig, vocab_size: usize) -> usize {
    let d = config.d_model;
    let f = config.d_ffn;
    let norm = 2 * d;
    let attention = 4 * (d * d + d);
    let ffn = d * f + f + f * d + d;
    let encoder_layer = 2 * norm + attention + ffn;
    let decoder_layer = 3 * norm + 2 * attention + ffn;
    vocab_size * d + config.enc_layers * encoder_layer + config.dec_layers * decoder_layer + 2 * norm
}
