use crate::config::{ConfigError, KeyValues};

use super::ModelError;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Model and sentence-embedding width `D`.
    pub dim: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_ffn_dim: usize,
    /// The decoder runs at width `2 * dim`.
    pub dec_ffn_dim: usize,
    pub vocab_size: usize,
    pub max_src_positions: usize,
    pub max_tgt_positions: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Full-size configuration: 12 encoder / 3 decoder layers, width 768,
    /// FFN 768*4 (encoder) and 768*2*4 (decoder), 256 positions, dropout 0.1.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            dim: 768,
            heads: 8,
            enc_layers: 12,
            dec_layers: 3,
            enc_ffn_dim: 768 * 4,
            dec_ffn_dim: 768 * 2 * 4,
            vocab_size,
            max_src_positions: 256,
            max_tgt_positions: 256,
            dropout: 0.1,
        }
    }

    /// CPU-sized configuration with the same proportions.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            dim: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 1,
            enc_ffn_dim: 64 * 4,
            dec_ffn_dim: 64 * 2 * 4,
            vocab_size,
            max_src_positions: 256,
            max_tgt_positions: 256,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads));
        }
        if self.enc_layers == 0 || self.enc_ffn_dim == 0 || self.dec_ffn_dim == 0 {
            return fail("layer counts and FFN widths must be positive".into());
        }
        if self.vocab_size < 2 {
            return fail(format!("vocab_size {} must hold at least pad and bos", self.vocab_size));
        }
        if self.max_src_positions == 0 || self.max_tgt_positions == 0 {
            return fail("positions must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("dim", self.dim);
        kv.set("heads", self.heads);
        kv.set("enc_layers", self.enc_layers);
        kv.set("dec_layers", self.dec_layers);
        kv.set("enc_ffn_dim", self.enc_ffn_dim);
        kv.set("dec_ffn_dim", self.dec_ffn_dim);
        kv.set("vocab_size", self.vocab_size);
        kv.set("max_src_positions", self.max_src_positions);
        kv.set("max_tgt_positions", self.max_tgt_positions);
        kv.set("dropout", self.dropout);
        kv
    }

    /// Overrides fields present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<(), ConfigError> {
        kv.apply("dim", &mut self.dim)?;
        kv.apply("heads", &mut self.heads)?;
        kv.apply("enc_layers", &mut self.enc_layers)?;
        kv.apply("dec_layers", &mut self.dec_layers)?;
        kv.apply("enc_ffn_dim", &mut self.enc_ffn_dim)?;
        kv.apply("dec_ffn_dim", &mut self.dec_ffn_dim)?;
        kv.apply("vocab_size", &mut self.vocab_size)?;
        kv.apply("max_src_positions", &mut self.max_src_positions)?;
        kv.apply("max_tgt_positions", &mut self.max_tgt_positions)?;
        kv.apply("dropout", &mut self.dropout)?;
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ModelError> {
        let mut c = Self::desk(kv.require("vocab_size")?);
        c.apply(kv)?;
        c.validate()?;
        Ok(c)
    }
}
