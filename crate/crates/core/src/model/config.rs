// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where layer norms sit. Only pre-norm is implemented: each node normalizes
/// its own summed input, so edges carry raw residual contributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    #[default]
    PreNorm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub norm_placement: NormPlacement,
    pub seed: u64,
    /// Replace layer norm with identity, GELU with identity and softmax
    /// attention with a fixed uniform causal average. Every node is then
    /// affine in its inputs, so any linear metric is linear in every node
    /// input.
    #[serde(default)]
    pub linear: bool,
}

impl ModelConfig {
    /// The induction toy: 2 layers, 2 heads, d_model 32.
    pub fn induction_toy(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_head: 16,
            d_mlp: 64,
            vocab_size,
            max_seq_len,
            norm_placement: NormPlacement::PreNorm,
            seed,
            linear: false,
        }
    }

    /// The induction toy with 4 heads of width 8: same d_model, 110 edges
    /// instead of 46, so circuits at high sparsity still hold a few edges.
    pub fn induction_wide(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            n_heads: 4,
            d_head: 8,
            ..Self::induction_toy(vocab_size, max_seq_len, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_heads == 0 || self.d_model == 0 || self.d_head == 0 || self.d_mlp == 0 {
            return bad("all dimensions must be at least 1");
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be at least 1");
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad("d_model must equal n_heads * d_head");
        }
        if self.vocab_size < 4 {
            return bad("vocab_size must be at least 4");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_head_split() {
        let mut c = ModelConfig::induction_toy(16, 8, 0);
        c.d_head = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_tiny_vocab() {
        let mut c = ModelConfig::induction_toy(16, 8, 0);
        c.vocab_size = 3;
        assert!(c.validate().is_err());
    }
}
