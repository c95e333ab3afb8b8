use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    /// MLP inner width as a multiple of `hidden_dim`.
    pub mlp_ratio: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            hidden_dim: 64,
            num_heads: 4,
            vocab_size: 64,
            context_len: 128,
            mlp_ratio: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "num_layers must be >= 2, got {}",
                self.num_layers
            )));
        }
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size == 0 || self.context_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config(
                "vocab_size, context_len and mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        self.hidden_dim * self.mlp_ratio
    }

    /// True when two configs describe interchangeable weight shapes.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.num_layers == other.num_layers
            && self.hidden_dim == other.hidden_dim
            && self.num_heads == other.num_heads
            && self.vocab_size == other.vocab_size
            && self.context_len == other.context_len
            && self.mlp_ratio == other.mlp_ratio
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads_and_shallow_models() {
        let mut c = ModelConfig {
            hidden_dim: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.hidden_dim = 32;
        c.validate().unwrap();
        c.num_layers = 1;
        assert!(c.validate().is_err());
    }
}
