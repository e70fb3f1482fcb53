//! Checkpoint directory `step-NNNNNNNN/`:
//!
//! - `model.bin`: `NYOMODL1` weights and config
//! - `train.bin`: `NYOTRN1` optimizer state
//! - `stream.txt`: `NYOSTREAM v1` data position (absent when training from memory)
//! - `manifest.json`: names the three files and records step and boundary status
//!
//! Each directory is written under a temporary name and renamed into place, so
//! a killed run never leaves a partial checkpoint under a canonical name.
//!
//! `train.bin` layout, little-endian:
//!
//! ```text
//! magic "NYOTRN1\n"
//! u64 step, u64 skipped_steps, u64 tokens_seen, u64 seed
//! u64 history length, f64 × length (recent total losses)
//! u64 tensor count, then per tensor: u64 name length, name, u64 count, f64 × count (first moments)
//! same again for second moments
//! ```

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use super::TrainError;
use crate::model::{load_model, save_model, ModelConfig, ModelParams};
use crate::scheduler::StreamCheckpoint;

pub const TRAIN_MAGIC: &[u8; 8] = b"NYOTRN1\n";
const HISTORY_LEN: usize = 128;

/// Everything besides the weights needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    /// Batches whose update was dropped for a non-finite gradient.
    pub skipped_steps: u64,
    pub tokens_seen: u64,
    pub seed: u64,
    /// Most recent total losses, oldest first.
    pub loss_history: VecDeque<f64>,
}

impl TrainState {
    pub fn new(params: &ModelParams, seed: u64) -> Self {
        Self {
            adam: AdamState::new(params),
            skipped_steps: 0,
            tokens_seen: 0,
            seed,
            loss_history: VecDeque::with_capacity(HISTORY_LEN),
        }
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub(crate) fn record_loss(&mut self, loss: f64) {
        if self.loss_history.len() == HISTORY_LEN {
            self.loss_history.pop_front();
        }
        self.loss_history.push_back(loss);
    }
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CheckpointCorrupt(msg.into())
}

fn put(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("train state truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn get_len(r: &mut impl Read, limit: usize) -> Result<usize, TrainError> {
    let n = get(r)?;
    usize::try_from(n)
        .ok()
        .filter(|&n| n <= limit)
        .ok_or_else(|| corrupt(format!("length {n} out of range")))
}

fn write_tensors(w: &mut impl Write, p: &ModelParams) -> std::io::Result<()> {
    let tensors = p.tensors();
    put(w, tensors.len() as u64)?;
    for (name, _, data) in tensors {
        put(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put(w, data.len() as u64)?;
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read, into: &mut ModelParams) -> Result<(), TrainError> {
    let mut slots = into.tensors_mut();
    if get_len(r, slots.len())? != slots.len() {
        return Err(corrupt("moment tensor count"));
    }
    for (name, _, data) in slots.iter_mut() {
        let n = get_len(r, 4096)?;
        let mut got = vec![0u8; n];
        r.read_exact(&mut got).map_err(|_| corrupt("train state truncated"))?;
        if got != name.as_bytes() {
            return Err(corrupt(format!("expected moment `{name}`")));
        }
        if get_len(r, data.len())? != data.len() {
            return Err(corrupt(format!("moment `{name}` has the wrong size")));
        }
        for x in data.iter_mut() {
            *x = f64::from_bits(get(r)?);
        }
    }
    Ok(())
}

pub fn write_train_state(mut w: impl Write, state: &TrainState) -> Result<(), TrainError> {
    w.write_all(TRAIN_MAGIC)?;
    for v in [state.adam.step, state.skipped_steps, state.tokens_seen, state.seed] {
        put(&mut w, v)?;
    }
    put(&mut w, state.loss_history.len() as u64)?;
    for x in &state.loss_history {
        w.write_all(&x.to_le_bytes())?;
    }
    write_tensors(&mut w, &state.adam.m)?;
    write_tensors(&mut w, &state.adam.v)?;
    w.flush()?;
    Ok(())
}

/// Reads a train state whose moments are shaped like `params`.
pub fn read_train_state(mut r: impl Read, params: &ModelParams) -> Result<TrainState, TrainError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("train state truncated"))?;
    if &magic != TRAIN_MAGIC {
        return Err(corrupt("bad train state magic"));
    }
    let mut state = TrainState::new(params, 0);
    state.adam.step = get(&mut r)?;
    state.skipped_steps = get(&mut r)?;
    state.tokens_seen = get(&mut r)?;
    state.seed = get(&mut r)?;
    let n = get_len(&mut r, HISTORY_LEN)?;
    for _ in 0..n {
        state.loss_history.push_back(f64::from_bits(get(&mut r)?));
    }
    read_tensors(&mut r, &mut state.adam.m)?;
    read_tensors(&mut r, &mut state.adam.v)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes in train state"));
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub step: u64,
    pub model: String,
    pub train_state: String,
    pub stream: Option<String>,
    /// True when no file was partly consumed, so resuming is exact.
    pub at_file_boundary: bool,
    pub tokens_seen: u64,
    /// Reserved for advisory metadata; always empty.
    #[serde(default)]
    pub notes: serde_json::Map<String, serde_json::Value>,
}

const MANIFEST_FORMAT: &str = "nyoforge-checkpoint-v1";

pub struct LoadedCheckpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    pub model_config: ModelConfig,
    pub params: ModelParams,
    pub state: TrainState,
    pub stream: Option<StreamCheckpoint>,
}

fn write_synced(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<(), TrainError>) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Writes `root/step-NNNNNNNN` atomically and returns its path.
pub fn save_checkpoint(
    root: &Path,
    model_config: &ModelConfig,
    params: &ModelParams,
    state: &TrainState,
    stream: Option<&StreamCheckpoint>,
    at_file_boundary: bool,
) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(root)?;
    let name = format!("step-{:08}", state.step());
    let tmp = root.join(format!(".tmp-{name}"));
    let dest = root.join(&name);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir(&tmp)?;
    save_model(&tmp.join("model.bin"), model_config, params)?;
    write_synced(&tmp.join("train.bin"), |w| write_train_state(w, state))?;
    if let Some(s) = stream {
        write_synced(&tmp.join("stream.txt"), |w| Ok(w.write_all(s.to_text().as_bytes())?))?;
    }
    let manifest = CheckpointManifest {
        format: MANIFEST_FORMAT.into(),
        step: state.step(),
        model: "model.bin".into(),
        train_state: "train.bin".into(),
        stream: stream.map(|_| "stream.txt".into()),
        at_file_boundary,
        tokens_seen: state.tokens_seen,
        notes: Default::default(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| corrupt(e.to_string()))?;
    write_synced(&tmp.join("manifest.json"), |w| Ok(w.write_all(json.as_bytes())?))?;
    if dest.exists() {
        fs::remove_dir_all(&dest)?;
    }
    fs::rename(&tmp, &dest)?;
    if let Ok(dir) = File::open(root) {
        let _ = dir.sync_all();
    }
    Ok(dest)
}

/// A checkpoint directory itself, or the highest-step checkpoint under a root.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf, TrainError> {
    if path.join("manifest.json").is_file() {
        return Ok(path.to_path_buf());
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(path)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let Some(step) = name.strip_prefix("step-").and_then(|s| s.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join("manifest.json").is_file() && best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, entry.path()));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| corrupt(format!("no checkpoint found under {}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let dir = resolve_checkpoint(path)?;
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(corrupt(format!("unknown manifest format `{}`", manifest.format)));
    }
    let (model_config, params) = load_model(&dir.join(&manifest.model)).map_err(|e| corrupt(e.to_string()))?;
    let state = read_train_state(BufReader::new(File::open(dir.join(&manifest.train_state))?), &params)?;
    if state.step() != manifest.step {
        return Err(corrupt("manifest step disagrees with train state"));
    }
    let stream = match &manifest.stream {
        Some(name) => Some(StreamCheckpoint::load(&dir.join(name)).map_err(|e| corrupt(e.to_string()))?),
        None => None,
    };
    Ok(LoadedCheckpoint {
        dir,
        manifest,
        model_config,
        params,
        state,
        stream,
    })
}
