use serde::{Deserialize, Serialize};

use super::ModuleKind;
use crate::error::{Error, Result};

/// Transformer encoder dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        Self {
            num_layers: 4,
            d_model: 64,
            num_heads: 4,
            d_ff: 128,
            vocab_size: 8192,
            max_seq_len: 64,
            num_classes: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config("vocab_size must be >= 3 (two reserved ids)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// `(d_in, d_out)` of an adaptable weight.
    pub fn module_dims(&self, kind: ModuleKind) -> (usize, usize) {
        match kind {
            ModuleKind::Query | ModuleKind::Key | ModuleKind::Value => (self.d_model, self.d_model),
            ModuleKind::Dense => (self.d_model, self.d_ff),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads_and_zeros() {
        let mut c = ModelConfig { num_heads: 3, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c.num_heads = 4;
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }
}
