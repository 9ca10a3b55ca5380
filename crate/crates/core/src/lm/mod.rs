//! A small decoder-only transformer language model with training at desk
//! scale and forward passes that expose per-layer representations at three
//! tap points (block output, attention sublayer output, MLP sublayer output).

mod checkpoint;
mod generate;
mod model;
mod tokenizer;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use generate::{answer_accuracy, generate_answer};
pub use model::{Model, TapRecord};
pub use tokenizer::Tokenizer;
pub use train::{
    answer_token_accuracy, loss_and_param_grads, sequence_loss, train_lm, LmSample, TrainHyper,
    TrainReport,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Positional encoding scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positional {
    Rotary,
    Learned,
}

/// Normalization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Rms,
    LayerNorm,
}

/// Architecture and initialization parameters for the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub positional: Positional,
    pub norm: Norm,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: minutes to train, deep enough for layer-wise
    /// trends, rotary + RMS so the positional ablation is meaningful.
    fn default() -> Self {
        Self {
            n_layers: 8,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: Tokenizer::VOCAB_SIZE,
            max_seq: 1024,
            positional: Positional::Rotary,
            norm: Norm::Rms,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Validates the structural invariants.
    pub fn validate(&self) -> Result<(), LmError> {
        let fail = |m: String| Err(LmError::InvalidConfig(m));
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.vocab_size == 0
            || self.max_seq == 0
        {
            return fail("all counts must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.positional == Positional::Rotary && (self.d_model / self.n_heads) % 2 != 0 {
            return fail(format!(
                "rotary positions need an even head dim, got {}",
                self.d_model / self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Errors raised by the language-model subsystem.
#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("character {0:?} is not in the model alphabet")]
    OutOfAlphabet(char),
    #[error("token id {0} outside vocabulary")]
    InvalidTokenId(usize),
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("cannot run the model on an empty sequence")]
    EmptySequence,
    #[error("training diverged: non-finite loss at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("model vocab_size {model} does not match tokenizer vocabulary {tokenizer}")]
    VocabMismatch { model: usize, tokenizer: usize },
    #[error("checkpoint magic/version mismatch")]
    BadMagic,
    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint header/payload size disagreement: header says {expected} bytes, file holds {found}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
