use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and seed of a decoder-only transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
    /// Read logits out through the token embedding instead of a separate `W_U`.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Two-layer desk configuration; the vocabulary size comes from the tokenizer.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            vocab_size,
            context_len: 192,
            seed: 0,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_layers < 2 {
            return fail("n_layers must be at least 2");
        }
        if self.d_model == 0 || self.n_heads == 0 {
            return fail("d_model and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be divisible by n_heads");
        }
        if self.d_ff < self.d_model {
            return fail("d_ff must be at least d_model");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size must be at least 2");
        }
        if self.context_len == 0 {
            return fail("context_len must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Total number of FFN neurons, `L · d_ff`.
    pub fn neuron_count(&self) -> usize {
        self.n_layers * self.d_ff
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk(300).validate().unwrap();
    }

    #[test]
    fn rejects_bad_shapes() {
        let base = ModelConfig::desk(300);
        for bad in [
            ModelConfig { n_layers: 1, ..base },
            ModelConfig { d_ff: 32, ..base },
            ModelConfig { vocab_size: 1, ..base },
            ModelConfig { n_heads: 3, ..base },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
