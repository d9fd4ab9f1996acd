//! Tiny decoder-only transformer language model plus decoding.

mod decode;
mod transformer;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tensor};

pub use decode::{argmax, greedy_decode, log_probs_with_temperature, top_k_sample, Decoded};
pub use transformer::LanguageModel;

/// Reserved padding id; never produced by decoding.
pub const PAD_ID: usize = 0;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("sequence of length {len} exceeds context length {context_len}")]
    SequenceTooLong { len: usize, context_len: usize },
    #[error("token id {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: usize, vocab_size: usize },
    #[error("empty token sequence")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("temperature must be > 0, got {0}")]
    InvalidTemperature(f64),
    #[error("top-k must lie in [1, {vocab_size}], got {k}")]
    InvalidTopK { k: usize, vocab_size: usize },
    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: usize, right: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub context_len: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { n_layers: 2, n_heads: 2, d_model: 64, context_len: 128, vocab_size: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.context_len == 0 {
            return bad("n_layers, n_heads, d_model and context_len must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Anything that scores next tokens. Implemented by [`LanguageModel`] and by
/// hand-built table models in tests.
pub trait LogitsModel {
    fn vocab_size(&self) -> usize;
    fn context_len(&self) -> usize;

    /// `L x V` matrix; row `t` scores the token following position `t`.
    fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError>;

    fn next_logits(&self, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
        let all = self.logits(tokens)?;
        Ok(all.row(all.rows() - 1).to_vec())
    }
}

impl<M: LogitsModel + ?Sized> LogitsModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn context_len(&self) -> usize {
        (**self).context_len()
    }
    fn logits(&self, tokens: &[usize]) -> Result<Tensor, ModelError> {
        (**self).logits(tokens)
    }
    fn next_logits(&self, tokens: &[usize]) -> Result<Vec<f64>, ModelError> {
        (**self).next_logits(tokens)
    }
}

pub(crate) fn check_tokens(tokens: &[usize], vocab_size: usize, context_len: usize) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if tokens.len() > context_len {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), context_len });
    }
    if let Some(&token) = tokens.iter().find(|&&t| t >= vocab_size) {
        return Err(ModelError::TokenOutOfVocab { token, vocab_size });
    }
    Ok(())
}
