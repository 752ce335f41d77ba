//! FOFE feedforward language model with tied embeddings, optional low-rank
//! adapters, and noise-contrastive / full-softmax heads.
//!
//! Parameters are stored in single precision; every loss, activation and
//! gradient is accumulated in double precision.

mod fofe;
mod lora;
mod network;
mod params;

pub use fofe::{fofe_encode, fofe_into};
pub use lora::{lora_merge, lora_wrap};
pub use network::{
    forward, nce_loss_and_grad, nce_probabilities, softmax_eval, Example, Forward, Minibatch,
    NceOutput,
};
pub use params::{Adapters, Dense, Gradients, LowRank, ModelDelta, ModelParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape and hyperparameters of the language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Number of most recent FOFE codes concatenated into the input.
    pub fofe_order: usize,
    /// Forgetting factor of the FOFE recursion.
    pub fofe_alpha: f64,
    pub hidden_widths: Vec<usize>,
    pub lora_rank: Option<usize>,
    /// Noise samples per example for NCE.
    pub nce_noise_k: usize,
    pub tie_embeddings: bool,
    /// Embedding rows are initialised uniformly in `[-embed_init, embed_init]`.
    pub embed_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::large_vocab()
    }
}

impl ModelConfig {
    /// 100k-word vocabulary, 256-dim tied embedding, third-order FOFE and
    /// four 768-wide hidden layers.
    pub fn large_vocab() -> Self {
        Self {
            vocab_size: 100_000,
            embed_dim: 256,
            fofe_order: 3,
            fofe_alpha: 0.7,
            hidden_widths: vec![768; 4],
            lora_rank: None,
            nce_noise_k: 1024,
            tie_embeddings: true,
            embed_init: 0.05,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.fofe_order * self.embed_dim
    }

    /// Width of the representation that is scored against embedding rows.
    pub fn last_hidden(&self) -> usize {
        self.hidden_widths
            .last()
            .copied()
            .unwrap_or_else(|| self.input_dim())
    }

    /// `(rows, cols)` of every dense weight matrix, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut fan_in = self.input_dim();
        self.hidden_widths
            .iter()
            .map(|&w| {
                let shape = (fan_in, w);
                fan_in = w;
                shape
            })
            .collect()
    }

    pub fn projection_shape(&self) -> (usize, usize) {
        (self.last_hidden(), self.embed_dim)
    }

    /// Shapes of every matrix that receives low-rank factors.
    pub fn adapted_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.vocab_size, self.embed_dim)];
        if !self.tie_embeddings {
            shapes.push((self.vocab_size, self.embed_dim));
        }
        shapes.extend(self.layer_shapes());
        shapes.push(self.projection_shape());
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fofe_alpha > 0.0 && self.fofe_alpha < 1.0) {
            return Err(Error::config("fofe_alpha", "must lie strictly between 0 and 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size", "must be at least 2"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be at least 1"));
        }
        if self.fofe_order == 0 {
            return Err(Error::config("fofe_order", "must be at least 1"));
        }
        if self.nce_noise_k == 0 {
            return Err(Error::config("nce_noise_k", "must be at least 1"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden_widths", "layer widths must be positive"));
        }
        if !(self.embed_init.is_finite() && self.embed_init >= 0.0) {
            return Err(Error::config("embed_init", "must be finite and non-negative"));
        }
        if let Some(r) = self.lora_rank {
            check_rank(self, r)?;
        }
        Ok(())
    }

    /// Number of scalars in the full parameter set.
    pub fn full_param_count(&self) -> usize {
        let tables = if self.tie_embeddings { 1 } else { 2 };
        let layers: usize = self.layer_shapes().iter().map(|(i, o)| i * o + o).sum();
        let (pr, pc) = self.projection_shape();
        tables * self.vocab_size * self.embed_dim + layers + pr * pc
    }
    /// Width of one row of the trainable row table implied by this config.
    pub fn trainable_row_width(&self) -> usize {
        let tables = if self.tie_embeddings { 1 } else { 2 };
        tables * self.lora_rank.unwrap_or(self.embed_dim)
    }

    /// Length of the trainable dense section implied by this config.
    pub fn trainable_dense_len(&self) -> usize {
        let layers = self.layer_shapes();
        let (pr, pc) = self.projection_shape();
        match self.lora_rank {
            None => layers.iter().map(|(i, o)| i * o + o).sum::<usize>() + pr * pc,
            Some(r) => {
                let tables = if self.tie_embeddings { 1 } else { 2 };
                tables * r * self.embed_dim
                    + layers.iter().map(|(i, o)| i * r + r * o + o).sum::<usize>()
                    + pr * r
                    + r * pc
            }
        }
    }
}

pub(crate) fn check_rank(cfg: &ModelConfig, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::config("lora_rank", "must be at least 1"));
    }
    for (rows, cols) in cfg.adapted_shapes() {
        if r >= rows.min(cols) {
            return Err(Error::config(
                "lora_rank",
                format!("rank {r} must be smaller than both dimensions of a {rows}x{cols} matrix"),
            ));
        }
    }
    Ok(())
}
