//! Miniature decoder-only transformer in f64 with hand-written gradients.
//!
//! ```text
//! tokens → embed → N × [ x + Attn(LN(x)) ; x + MLP(LN(x)) ] → LN → head → logits
//! Attn: q,k,v = a·Wq, a·Wk, a·Wv ; per-head LN on q and k ; RoPE ; causal softmax(q·kᵀ/√d_head) ; ·Wo
//! MLP:  GELU(a·W1 + b1)·W2 + b2
//! ```

mod backward;
mod forward;
mod io;
mod loss;
mod ops;
mod params;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::backward;
pub(crate) use backward::backward_into;
pub use forward::{attention_weights, forward, forward_with_trace, segment_ids, ForwardTrace, LayerTrace};
pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC};
pub use loss::{compute_loss, loss_gradient, LossBreakdown};
pub use ops::{gelu, gelu_grad, layer_norm, rope_apply, rope_unapply};
pub use params::{init_params, LayerParams, ModelParams, ParamKind};
pub use tensor::Matrix;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("bad model configuration: {0}")]
    BadConfig(String),
    #[error("rotary embedding needs an even head dimension, got {0}")]
    OddHeadDim(usize),
    #[error("sequence of {len} tokens exceeds context length {context_len}")]
    LengthExceedsContext { len: usize, context_len: usize },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("every target position is masked")]
    AllMasked,
    #[error("trace does not match the model: {0}")]
    TraceMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt model checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which logit regularizer is added to the cross-entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    /// Squared maximum logit per position.
    #[default]
    Maxz,
    /// Squared log-partition per position.
    Auxz,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub mode: RegularizerMode,
    pub maxz_coeff: f64,
    pub auxz_coeff: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: RegularizerMode::Maxz,
            maxz_coeff: 2e-4,
            auxz_coeff: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub context_len: usize,
    pub vocab_size: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub tie_embeddings: bool,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            context_len: 128,
            vocab_size: 512,
            mlp_ratio: 4,
            tie_embeddings: true,
            rope_base: 10_000.0,
            norm_eps: 1e-5,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Full-scale 7B shape. Kept as a reference preset; far too large to
    /// instantiate in f64 on a desk machine.
    pub fn wonton7b() -> Self {
        Self {
            d_model: 4096,
            n_heads: 32,
            n_layers: 32,
            context_len: 2048,
            vocab_size: 139_776,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "wonton7b" => Some(Self::wonton7b()),
            "desk" => Some(Self::default()),
            _ => None,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn d_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::BadConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.vocab_size == 0 || self.mlp_ratio == 0 {
            return bad("dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.d_head() % 2 != 0 {
            return Err(ModelError::OddHeadDim(self.d_head()));
        }
        if self.d_head() < 2 {
            return bad("head dimension must be at least 2");
        }
        if self.context_len < 2 {
            return bad("context_len must be at least 2");
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps >= 0.0) {
            return bad("rope_base must exceed 1 and norm_eps must be non-negative");
        }
        if !(self.loss.maxz_coeff >= 0.0) || !(self.loss.auxz_coeff >= 0.0) {
            return bad("regularizer coefficients must be non-negative");
        }
        Ok(())
    }
}
