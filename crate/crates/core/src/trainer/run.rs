use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::Serialize;

use super::checkpoint::{save_checkpoint, LoadedCheckpoint, TrainState};
use super::monitor::{collect_metrics, Monitors};
use super::optim::{adamw_step, clip_gradients};
use super::schedule::cosine_lr;
use super::{OptimConfig, TrainError};
use crate::corpus_stream::StreamError;
use crate::model::{
    backward_into, compute_loss, forward_with_trace, init_params, loss_gradient, ForwardTrace, LossBreakdown, Matrix,
    ModelConfig, ModelError, ModelParams,
};
use crate::scheduler::{DataStream, StreamCheckpoint, TokenBatch};
use crate::tokenizer::TokenId;

/// One training sequence: next-token targets, `-1` where the loss is masked.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<i64>,
    /// Document ends for block-diagonal attention, if any.
    pub segment_ends: Option<Vec<usize>>,
}

/// Shifts each packed window into inputs `tokens[..L-1]` and targets
/// `tokens[1..]`, masking targets that fall on padding.
pub fn batch_examples(batch: &TokenBatch) -> Vec<Example> {
    batch
        .sequences
        .iter()
        .map(|s| {
            let len = s.tokens.len();
            let content = s.content_len();
            Example {
                inputs: s.tokens[..len - 1].to_vec(),
                targets: (1..len)
                    .map(|i| if i < content { s.tokens[i] as i64 } else { -1 })
                    .collect(),
                segment_ends: Some(s.segment_ends()),
            }
        })
        .collect()
}

/// Wall-clock measurements; the only non-deterministic part of a log line.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Timing {
    pub step_seconds: f64,
    pub tokens_per_sec: f64,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Optimizer steps completed after this batch.
    pub step: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub monitors: Monitors,
    /// Unmasked target tokens in the batch.
    pub tokens: usize,
    pub skipped: bool,
    pub events: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sequences: Option<[u64; 2]>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub source_tokens: BTreeMap<String, usize>,
    pub timing: Timing,
}

/// Everything computed during a step, for inspection and tests.
pub struct StepDetail {
    pub report: StepReport,
    pub traces: Vec<ForwardTrace>,
    pub logits: Vec<Matrix>,
    /// Gradients before clipping.
    pub grads: ModelParams,
}

pub struct Trainer {
    pub model_config: ModelConfig,
    pub optim: OptimConfig,
    pub params: ModelParams,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, optim: OptimConfig, base_std: f64, seed: u64) -> Result<Self, TrainError> {
        optim.validate()?;
        let params = init_params(&model_config, base_std, seed)?;
        let state = TrainState::new(&params, seed);
        Ok(Self {
            model_config,
            optim,
            params,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: LoadedCheckpoint, optim: OptimConfig) -> Result<Self, TrainError> {
        optim.validate()?;
        Ok(Self {
            model_config: ckpt.model_config,
            optim,
            params: ckpt.params,
            state: ckpt.state,
        })
    }

    pub fn step(&self) -> u64 {
        self.state.step()
    }

    /// Forward and backward over a set of examples without updating anything.
    /// The loss is averaged over every unmasked target in the set.
    pub fn loss_and_grads(
        &self,
        examples: &[Example],
    ) -> Result<(LossBreakdown, ModelParams, Vec<ForwardTrace>, Vec<Matrix>), TrainError> {
        let mut traces = Vec::with_capacity(examples.len());
        let mut logits = Vec::with_capacity(examples.len());
        let mut targets = Vec::new();
        for ex in examples {
            if ex.inputs.len() != ex.targets.len() {
                return Err(TrainError::ShapeMismatch("inputs and targets differ in length".into()));
            }
            let (l, t) = forward_with_trace(&self.params, &self.model_config, &ex.inputs, ex.segment_ends.as_deref())?;
            logits.push(l);
            traces.push(t);
            targets.extend_from_slice(&ex.targets);
        }
        let stacked = Matrix::vstack(&logits);
        let loss = compute_loss(&stacked, &targets, &self.model_config.loss)?;
        let d_logits = loss_gradient(&stacked, &targets, &self.model_config.loss)?;
        let mut grads = self.params.zeros_like();
        let mut row = 0;
        for (trace, l) in traces.iter().zip(&logits) {
            let part = d_logits.rows_range(row, row + l.rows);
            row += l.rows;
            backward_into(&self.params, &self.model_config, trace, &part, &mut grads)?;
        }
        Ok((loss, grads, traces, logits))
    }

    /// One optimizer step over `examples`.
    pub fn train_step(&mut self, examples: &[Example]) -> Result<StepDetail, TrainError> {
        let started = Instant::now();
        let lr = cosine_lr(self.state.step(), &self.optim);
        let (loss, grads, traces, logits) = self.loss_and_grads(examples)?;
        let monitors = collect_metrics(&traces, &grads, &logits, self.model_config.n_heads)?;
        let mut events = Vec::new();
        let mut clipped = grads.clone();
        let (grad_norm, skipped) = match clip_gradients(&mut clipped, self.optim.clip_norm) {
            Ok(norm) => {
                adamw_step(&mut self.params, &clipped, &mut self.state.adam, lr, &self.optim)?;
                (norm, false)
            }
            Err(TrainError::NonFiniteGradient) => {
                log::warn!("non-finite gradient at step {}; update skipped", self.state.step());
                events.push("non_finite_gradient".to_string());
                self.state.skipped_steps += 1;
                (f64::NAN, true)
            }
            Err(e) => return Err(e),
        };
        if !monitors.all_finite() || !loss.total.is_finite() {
            log::warn!("non-finite monitor value at step {}", self.state.step());
            events.push("non_finite_monitor".to_string());
        }
        let tokens = loss.targets;
        self.state.tokens_seen += tokens as u64;
        self.state.record_loss(loss.total);
        let seconds = started.elapsed().as_secs_f64();
        let report = StepReport {
            step: self.state.step(),
            lr,
            loss,
            grad_norm,
            monitors,
            tokens,
            skipped,
            events,
            sequences: None,
            source_tokens: BTreeMap::new(),
            timing: Timing {
                step_seconds: seconds,
                tokens_per_sec: if seconds > 0.0 { tokens as f64 / seconds } else { 0.0 },
            },
        };
        Ok(StepDetail {
            report,
            traces,
            logits,
            grads,
        })
    }

    /// One optimizer step over a packed batch.
    pub fn train_batch(&mut self, batch: &TokenBatch) -> Result<StepDetail, TrainError> {
        let mut detail = self.train_step(&batch_examples(batch))?;
        detail.report.sequences = Some([batch.metadata.first_sequence, batch.metadata.end_sequence]);
        detail.report.source_tokens = batch.metadata.source_tokens.clone();
        Ok(detail)
    }
}

/// Where training batches come from.
pub trait BatchSource {
    fn next_batch(&mut self) -> Result<Option<TokenBatch>, StreamError>;

    /// Resume point, if the source can be checkpointed.
    fn stream_checkpoint(&self) -> Option<StreamCheckpoint>;

    fn at_file_boundary(&self) -> bool;

    fn vocab_size(&self) -> Option<usize>;
}

impl BatchSource for DataStream {
    fn next_batch(&mut self) -> Result<Option<TokenBatch>, StreamError> {
        DataStream::next_batch(self)
    }

    fn stream_checkpoint(&self) -> Option<StreamCheckpoint> {
        Some(self.checkpoint())
    }

    fn at_file_boundary(&self) -> bool {
        DataStream::at_file_boundary(self)
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.vocab_size())
    }
}

/// In-memory batches, mainly for tests.
impl BatchSource for std::collections::VecDeque<TokenBatch> {
    fn next_batch(&mut self) -> Result<Option<TokenBatch>, StreamError> {
        Ok(self.pop_front())
    }

    fn stream_checkpoint(&self) -> Option<StreamCheckpoint> {
        None
    }

    fn at_file_boundary(&self) -> bool {
        false
    }

    fn vocab_size(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Save every this many optimizer steps; 0 disables periodic saves.
    pub checkpoint_every: u64,
    /// Return after this many steps in this invocation, as if interrupted.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_step: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub skipped_steps: u64,
    pub checkpoints: Vec<PathBuf>,
    pub stream_ended: bool,
}

/// Trains until `total_steps`, the end of the stream, or `stop_after`.
/// Writes one JSON object per step to `log` and checkpoints every
/// `checkpoint_every` steps plus once at the end.
pub fn train_loop<S: BatchSource, W: Write>(
    trainer: &mut Trainer,
    source: &mut S,
    opts: &LoopOptions,
    mut log: Option<&mut W>,
) -> Result<TrainSummary, TrainError> {
    if let Some(v) = source.vocab_size() {
        if v != trainer.model_config.vocab_size {
            return Err(TrainError::VocabMismatch {
                tokenizer: v,
                model: trainer.model_config.vocab_size,
            });
        }
    }
    let mut summary = TrainSummary::default();
    let mut last_saved = None;
    while trainer.step() < trainer.optim.total_steps {
        if opts.stop_after.is_some_and(|n| summary.steps_run >= n) {
            break;
        }
        let Some(batch) = source.next_batch()? else {
            summary.stream_ended = true;
            break;
        };
        let detail = match trainer.train_batch(&batch) {
            Ok(d) => d,
            Err(TrainError::Model(ModelError::AllMasked)) => {
                log::warn!("batch without any target token skipped");
                continue;
            }
            Err(e) => return Err(e),
        };
        let report = detail.report;
        summary.steps_run += 1;
        summary.first_loss.get_or_insert(report.loss.total);
        summary.last_loss = Some(report.loss.total);
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &report).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && !report.skipped && trainer.step() % opts.checkpoint_every == 0 {
                summary.checkpoints.push(save_checkpoint(
                    dir,
                    &trainer.model_config,
                    &trainer.params,
                    &trainer.state,
                    source.stream_checkpoint().as_ref(),
                    source.at_file_boundary(),
                )?);
                last_saved = Some(trainer.step());
            }
        }
    }
    if let Some(w) = log {
        w.flush()?;
    }
    if let Some(dir) = &opts.checkpoint_dir {
        if last_saved != Some(trainer.step()) {
            summary.checkpoints.push(save_checkpoint(
                dir,
                &trainer.model_config,
                &trainer.params,
                &trainer.state,
                source.stream_checkpoint().as_ref(),
                source.at_file_boundary(),
            )?);
        }
    }
    summary.final_step = trainer.step();
    summary.skipped_steps = trainer.state.skipped_steps;
    Ok(summary)
}
