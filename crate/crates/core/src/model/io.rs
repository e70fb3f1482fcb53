//! `NYOMODL1` model checkpoint, little-endian:
//!
//! ```text
//! magic  "NYOMODL1"
//! u64 × 8  d_model n_heads n_layers context_len vocab_size mlp_ratio tie_embeddings regularizer_mode
//! f64 × 4  rope_base norm_eps maxz_coeff auxz_coeff
//! u64      tensor count
//! per tensor, in ModelParams order: u64 name length, name bytes, u64 element count, f64 × count
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::params::ModelParams;
use super::{LossConfig, ModelConfig, ModelError, RegularizerMode};

pub const MODEL_MAGIC: &[u8; 8] = b"NYOMODL1";

fn mode_code(mode: RegularizerMode) -> u64 {
    match mode {
        RegularizerMode::None => 0,
        RegularizerMode::Maxz => 1,
        RegularizerMode::Auxz => 2,
    }
}

pub fn write_model<W: Write>(mut w: W, cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    params.check_shapes(cfg)?;
    w.write_all(MODEL_MAGIC)?;
    for v in [
        cfg.d_model,
        cfg.n_heads,
        cfg.n_layers,
        cfg.context_len,
        cfg.vocab_size,
        cfg.mlp_ratio,
        cfg.tie_embeddings as usize,
    ] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&mode_code(cfg.loss.mode).to_le_bytes())?;
    for v in [cfg.rope_base, cfg.norm_eps, cfg.loss.maxz_coeff, cfg.loss.auxz_coeff] {
        w.write_all(&v.to_le_bytes())?;
    }
    let tensors = params.tensors();
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, _, data) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(data.len() as u64).to_le_bytes())?;
        for x in data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CheckpointCorrupt(msg.into())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, ModelError> {
    Ok(f64::from_bits(read_u64(r)?))
}

fn read_usize<R: Read>(r: &mut R) -> Result<usize, ModelError> {
    usize::try_from(read_u64(r)?).map_err(|_| corrupt("integer overflow"))
}

pub fn read_model<R: Read>(mut r: R) -> Result<(ModelConfig, ModelParams), ModelError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated"))?;
    if &magic != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let d_model = read_usize(&mut r)?;
    let n_heads = read_usize(&mut r)?;
    let n_layers = read_usize(&mut r)?;
    let context_len = read_usize(&mut r)?;
    let vocab_size = read_usize(&mut r)?;
    let mlp_ratio = read_usize(&mut r)?;
    let tie_embeddings = match read_u64(&mut r)? {
        0 => false,
        1 => true,
        v => return Err(corrupt(format!("bad tie flag {v}"))),
    };
    let mode = match read_u64(&mut r)? {
        0 => RegularizerMode::None,
        1 => RegularizerMode::Maxz,
        2 => RegularizerMode::Auxz,
        v => return Err(corrupt(format!("bad regularizer mode {v}"))),
    };
    let cfg = ModelConfig {
        d_model,
        n_heads,
        n_layers,
        context_len,
        vocab_size,
        mlp_ratio,
        tie_embeddings,
        rope_base: read_f64(&mut r)?,
        norm_eps: read_f64(&mut r)?,
        loss: LossConfig {
            mode,
            maxz_coeff: read_f64(&mut r)?,
            auxz_coeff: read_f64(&mut r)?,
        },
    };
    cfg.validate().map_err(|e| corrupt(e.to_string()))?;
    let mut params = ModelParams::zeros(&cfg);
    let count = read_usize(&mut r)?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(corrupt(format!("{count} tensors, expected {}", slots.len())));
    }
    for (name, _, data) in slots.iter_mut() {
        let len = read_usize(&mut r)?;
        if len != name.len() {
            return Err(corrupt(format!("expected tensor `{name}`")));
        }
        let mut got = vec![0u8; len];
        r.read_exact(&mut got).map_err(|_| corrupt("truncated"))?;
        if got != name.as_bytes() {
            return Err(corrupt(format!("expected tensor `{name}`, found `{}`", String::from_utf8_lossy(&got))));
        }
        let n = read_usize(&mut r)?;
        if n != data.len() {
            return Err(corrupt(format!("`{name}` has {n} entries, expected {}", data.len())));
        }
        for x in data.iter_mut() {
            *x = read_f64(&mut r)?;
        }
    }
    drop(slots);
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes"));
    }
    Ok((cfg, params))
}

pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, cfg, params)?;
    w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    read_model(BufReader::new(File::open(path)?))
}
