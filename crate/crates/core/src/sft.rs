//! Supervised fine-tuning on single-turn question/answer pairs with the loss
//! restricted to the answer and the closing EOS.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::{TokenId, TokenizerModel, BOS_ID, EOS_ID};
use crate::trainer::{Example, OptimConfig, StepReport, TrainError, TrainState, Trainer};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("question must not be empty")]
    EmptyQuestion,
    #[error("example needs {len} tokens but the context holds {context_len}")]
    TooLong { len: usize, context_len: usize },
    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),
    #[error("no usable examples")]
    EmptyDataset,
    #[error("malformed record at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    pub question: String,
    pub answer: String,
}

/// `<s> [INST] {question} [/INST] {answer} </s>`
pub fn render_template(ex: &ChatExample) -> String {
    format!("<s> [INST] {} [/INST] {} </s>", ex.question, ex.answer)
}

/// Splits a rendered template back into its question and answer at the first
/// `[/INST]` marker.
pub fn parse_template(rendered: &str) -> Option<ChatExample> {
    let body = rendered.strip_prefix("<s> [INST] ")?.strip_suffix(" </s>")?;
    let (question, answer) = body.split_once(" [/INST] ")?;
    Some(ChatExample {
        question: question.to_string(),
        answer: answer.to_string(),
    })
}

/// Encoded template plus its loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftItem {
    pub tokens: Vec<TokenId>,
    /// `loss_mask[i]` is true when predicting `tokens[i + 1]` counts toward
    /// the loss; one entry per prediction position.
    pub loss_mask: Vec<bool>,
    /// Tokens in the encoded answer, excluding EOS.
    pub answer_tokens: usize,
}

impl SftItem {
    pub fn to_example(&self) -> Example {
        let n = self.tokens.len();
        Example {
            inputs: self.tokens[..n - 1].to_vec(),
            targets: self.tokens[1..]
                .iter()
                .zip(&self.loss_mask)
                .map(|(&t, &m)| if m { t as i64 } else { -1 })
                .collect(),
            segment_ends: None,
        }
    }
}

/// BOS, the prompt through `[/INST] ` as plain text, the answer, then EOS.
/// The space after `<s>` and before `</s>` has no token of its own: the
/// specials stand in for them.
pub fn build_sft_item(tokenizer: &TokenizerModel, ex: &ChatExample, context_len: usize) -> Result<SftItem, SftError> {
    if ex.question.is_empty() {
        return Err(SftError::EmptyQuestion);
    }
    let prompt = tokenizer.encode(&format!("[INST] {} [/INST] ", ex.question), false);
    let answer = tokenizer.encode(&ex.answer, false);
    let mut tokens = Vec::with_capacity(prompt.len() + answer.len() + 2);
    tokens.push(BOS_ID);
    tokens.extend_from_slice(&prompt);
    tokens.extend_from_slice(&answer);
    tokens.push(EOS_ID);
    if tokens.len() - 1 > context_len {
        return Err(SftError::TooLong {
            len: tokens.len() - 1,
            context_len,
        });
    }
    let answer_start = 1 + prompt.len();
    let loss_mask = (1..tokens.len()).map(|target| target >= answer_start).collect();
    Ok(SftItem {
        tokens,
        loss_mask,
        answer_tokens: answer.len(),
    })
}

pub fn load_chat_jsonl(path: &Path) -> Result<Vec<ChatExample>, SftError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: ChatExample = serde_json::from_str(&line).map_err(|e| SftError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub final_lr_ratio: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 8,
            epochs: 1,
            final_lr_ratio: 0.1,
            weight_decay: 0.1,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug)]
pub struct SftOutcome {
    pub steps: u64,
    pub epochs: u32,
    pub skipped_too_long: usize,
    pub reports: Vec<StepReport>,
    /// Optimizer state after the last step.
    pub state: TrainState,
}

pub fn steps_per_epoch(items: usize, batch_size: usize) -> usize {
    items.div_ceil(batch_size.max(1))
}

/// Fine-tunes `params` in place over `dataset` for 1 to 3 epochs.
pub fn sft_run<W: Write>(
    model_config: &ModelConfig,
    params: &mut ModelParams,
    tokenizer: &TokenizerModel,
    dataset: &[ChatExample],
    cfg: &SftConfig,
    mut log: Option<&mut W>,
) -> Result<SftOutcome, SftError> {
    if tokenizer.vocab_size() != model_config.vocab_size {
        return Err(SftError::CheckpointIncompatible(format!(
            "tokenizer has {} entries, model expects {}",
            tokenizer.vocab_size(),
            model_config.vocab_size
        )));
    }
    params
        .check_shapes(model_config)
        .map_err(|e| SftError::CheckpointIncompatible(e.to_string()))?;
    let epochs = cfg.epochs.clamp(1, 3);
    if epochs != cfg.epochs {
        log::warn!("epochs {} outside 1..=3, using {epochs}", cfg.epochs);
    }
    let mut skipped_too_long = 0;
    let mut items = Vec::new();
    for ex in dataset {
        match build_sft_item(tokenizer, ex, model_config.context_len) {
            Ok(item) => items.push(item.to_example()),
            Err(SftError::TooLong { len, context_len }) => {
                log::warn!("skipping example of {len} tokens (context {context_len})");
                skipped_too_long += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if items.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    let batch_size = cfg.batch_size.max(1);
    let per_epoch = steps_per_epoch(items.len(), batch_size) as u64;
    let total = per_epoch * epochs as u64;
    let optim = OptimConfig {
        max_lr: cfg.lr,
        warmup_steps: 0,
        total_steps: total,
        final_lr_ratio: cfg.final_lr_ratio,
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        ..OptimConfig::default()
    };
    let mut trainer = Trainer {
        model_config: model_config.clone(),
        optim,
        state: TrainState::new(params, 0),
        params: params.clone(),
    };
    let mut outcome = SftOutcome {
        steps: 0,
        epochs,
        skipped_too_long,
        reports: Vec::new(),
        state: TrainState::new(params, 0),
    };
    let result = (|| -> Result<(), SftError> {
        for _ in 0..epochs {
            for chunk in items.chunks(batch_size) {
                let report = trainer.train_step(chunk)?.report;
                if let Some(w) = log.as_deref_mut() {
                    serde_json::to_writer(&mut *w, &report).map_err(std::io::Error::other)?;
                    w.write_all(b"\n")?;
                }
                outcome.reports.push(report);
                outcome.steps += 1;
            }
        }
        Ok(())
    })();
    *params = trainer.params;
    outcome.state = trainer.state;
    result.map(|_| outcome)
}
