//! Pretraining loop: AdamW with a warmup-cosine schedule, global-norm
//! clipping, per-step stability monitors and atomic checkpoints that bundle
//! model, optimizer and data-stream state.

mod checkpoint;
mod monitor;
mod optim;
mod run;
mod schedule;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus_stream::StreamError;
use crate::model::ModelError;

pub use checkpoint::{
    load_checkpoint, read_train_state, resolve_checkpoint, save_checkpoint, write_train_state, CheckpointManifest,
    LoadedCheckpoint, TrainState, TRAIN_MAGIC,
};
pub use monitor::{collect_metrics, Monitors};
pub use optim::{adamw_step, clip_gradients, AdamState};
pub use run::{
    batch_examples, train_loop, BatchSource, Example, LoopOptions, StepDetail, StepReport, Timing, TrainSummary,
    Trainer,
};
pub use schedule::{cosine_lr, lr_floor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient norm; step skipped")]
    NonFiniteGradient,
    #[error("no forward trace retained")]
    TraceMissing,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tokenizer vocabulary {tokenizer} does not match model vocabulary {model}")]
    VocabMismatch { tokenizer: usize, model: usize },
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("bad optimizer configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            clip_norm: 1.0,
            max_lr: 3.0e-4,
            warmup_steps: 2000,
            total_steps: 20_000,
            final_lr_ratio: 0.1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("betas must lie in (0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(0.0..=1.0).contains(&self.final_lr_ratio) {
            return bad(format!("final_lr_ratio must lie in [0, 1], got {}", self.final_lr_ratio));
        }
        if !(self.max_lr >= 0.0) || !(self.eps >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("max_lr, eps and weight_decay must be non-negative and clip_norm positive".into());
        }
        Ok(())
    }
}
