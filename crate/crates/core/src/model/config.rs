// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a decoder-only transformer. `d_mlp == 0` means attention-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub batch: usize,
    pub d_mlp: usize,
}

impl ModelConfig {
    /// Config with `d_k = d_model / n_heads`.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_k: if n_heads == 0 { 0 } else { d_model / n_heads },
            vocab,
            seq_len,
            batch: 1,
            d_mlp: 0,
        }
    }

    pub fn with_mlp(mut self, d_mlp: usize) -> Self {
        self.d_mlp = d_mlp;
        self
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn has_mlp(&self) -> bool {
        self.d_mlp > 0
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_k", self.d_k),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("batch", self.batch),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.n_heads * self.d_k != self.d_model {
            problems.push(format!(
                "n_heads * d_k = {} * {} != d_model = {}",
                self.n_heads, self.d_k, self.d_model
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    /// Number of weight elements, in the weight-file order.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d
            + 4 * d * d
            + if self.has_mlp() {
                2 * d + d * self.d_mlp + self.d_mlp + self.d_mlp * d + d
            } else {
                0
            };
        self.vocab * d + self.seq_len * d + self.n_layers * per_layer + 2 * d + d * self.vocab
    }
}
