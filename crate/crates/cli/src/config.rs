//! TOML run configuration. See the README for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use nyoforge_core::corpus_stream::{validate_specs, DatasetSpec};
use nyoforge_core::model::ModelConfig;
use nyoforge_core::scheduler::{ExhaustionPolicy, StreamConfig};
use nyoforge_core::sft::SftConfig;
use nyoforge_core::tokenizer::RESERVED_VOCAB;
use nyoforge_core::trainer::OptimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SEED_ENV: &str = "NYOFORGE_SEED";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default)]
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub sft: SftConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    /// Trained tokenizer file. Required by every command except `tokenizer-train`.
    pub path: Option<PathBuf>,
    /// Training target; defaults to the model's vocab size.
    pub vocab_size: Option<usize>,
    #[serde(default = "one")]
    pub min_char_frequency: u64,
}

fn one() -> u64 {
    1
}

/// A preset name plus any `ModelConfig` fields overriding it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelSection {
    pub preset: Option<String>,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub seed: u64,
    pub world_size: usize,
    pub rank: usize,
    pub num_workers: usize,
    pub batch_size: usize,
    pub shuffle_buffer: usize,
    pub prefetch_depth: usize,
    pub policy: ExhaustionPolicy,
    pub base_std: f64,
    pub checkpoint_dir: PathBuf,
    pub checkpoint_every: u64,
    pub log_path: Option<PathBuf>,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        Self {
            seed: 0,
            world_size: 1,
            rank: 0,
            num_workers: 2,
            batch_size: 8,
            shuffle_buffer: 0,
            prefetch_depth: 64,
            policy: ExhaustionPolicy::Renormalize,
            base_std: 0.02,
            checkpoint_dir: PathBuf::from("checkpoints"),
            checkpoint_every: 100,
            log_path: None,
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::runtime("ConfigError", msg)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| config_error(e.to_string()))
    }

    /// Reads `path`, resolves relative paths against its directory and applies
    /// the seed precedence: `seed_flag`, then `NYOFORGE_SEED`, then the file.
    pub fn load(path: &Path, seed_flag: Option<u64>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.runtime.seed = resolve_seed(seed_flag, std::env::var(SEED_ENV).ok().as_deref(), cfg.runtime.seed)?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for d in &mut self.datasets {
            fix(&mut d.root);
        }
        if let Some(p) = &mut self.tokenizer.path {
            fix(p);
        }
        fix(&mut self.runtime.checkpoint_dir);
        if let Some(p) = &mut self.runtime.log_path {
            fix(p);
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let name = self.model.preset.as_deref().unwrap_or("desk");
        let base = ModelConfig::preset(name).ok_or_else(|| config_error(format!("unknown model preset `{name}`")))?;
        let mut table = toml::Table::try_from(&base).map_err(|e| config_error(e.to_string()))?;
        for (key, value) in &self.model.overrides {
            match (table.get_mut(key), value) {
                (None, _) => return Err(config_error(format!("unknown model field `{key}`"))),
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => {
                    for (k, v) in src {
                        if !dst.contains_key(k) {
                            return Err(config_error(format!("unknown model field `{key}.{k}`")));
                        }
                        dst.insert(k.clone(), v.clone());
                    }
                }
                (Some(slot), v) => *slot = v.clone(),
            }
        }
        let cfg: ModelConfig = table.try_into().map_err(|e: toml::de::Error| config_error(e.to_string()))?;
        cfg.validate().map_err(|e| CliError::from_error("ModelError", &e))?;
        Ok(cfg)
    }

    pub fn tokenizer_vocab_size(&self) -> Result<usize, CliError> {
        match self.tokenizer.vocab_size {
            Some(v) => Ok(v),
            None => Ok(self.model_config()?.vocab_size),
        }
    }

    pub fn tokenizer_path(&self) -> Result<&Path, CliError> {
        self.tokenizer
            .path
            .as_deref()
            .ok_or_else(|| config_error("tokenizer.path is not set"))
    }

    pub fn stream_config(&self, context_len: usize) -> StreamConfig {
        StreamConfig {
            context_len,
            batch_size: self.runtime.batch_size,
            num_workers: self.runtime.num_workers,
            shuffle_buffer: self.runtime.shuffle_buffer,
            prefetch_depth: self.runtime.prefetch_depth,
            policy: self.runtime.policy,
        }
    }

    /// Checks every section. The tokenizer file must exist unless it is about
    /// to be produced.
    pub fn validate(&self, tokenizer_must_exist: bool) -> Result<(), CliError> {
        validate_specs(&self.datasets).map_err(|e| CliError::from_error("StreamError", &e))?;
        for d in &self.datasets {
            if !d.root.is_dir() {
                return Err(config_error(format!("dataset `{}` root {} does not exist", d.name, d.root.display())));
            }
        }
        if tokenizer_must_exist {
            let p = self.tokenizer_path()?;
            if !p.is_file() {
                return Err(config_error(format!("tokenizer {} does not exist", p.display())));
            }
        }
        let model = self.model_config()?;
        let vocab = self.tokenizer_vocab_size()?;
        if vocab <= RESERVED_VOCAB {
            return Err(config_error(format!("tokenizer vocab_size must exceed {RESERVED_VOCAB}")));
        }
        if !tokenizer_must_exist && vocab != model.vocab_size {
            log::warn!("tokenizer.vocab_size {vocab} differs from model.vocab_size {}", model.vocab_size);
        }
        self.optim.validate().map_err(|e| CliError::from_error("TrainError", &e))?;
        let rt = &self.runtime;
        if rt.world_size == 0 || rt.rank >= rt.world_size {
            return Err(config_error(format!("rank {} invalid for world_size {}", rt.rank, rt.world_size)));
        }
        if rt.num_workers == 0 || rt.batch_size == 0 || rt.prefetch_depth == 0 {
            return Err(config_error("num_workers, batch_size and prefetch_depth must be positive"));
        }
        if !(rt.base_std > 0.0 && rt.base_std.is_finite()) {
            return Err(config_error("base_std must be positive"));
        }
        Ok(())
    }
}

pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map_err(|_| config_error(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        _ => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(3), Some("5"), 7).unwrap(), 3);
        assert_eq!(resolve_seed(None, Some("5"), 7).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 7).unwrap(), 7);
        assert_eq!(resolve_seed(None, Some(""), 7).unwrap(), 7);
        assert!(resolve_seed(None, Some("x"), 7).is_err());
    }

    #[test]
    fn preset_with_overrides() {
        let cfg = RunConfig::parse(
            "[model]\npreset = \"desk\"\nn_layers = 3\n[model.loss]\nmode = \"auxz\"\n",
        )
        .unwrap();
        let m = cfg.model_config().unwrap();
        assert_eq!(m.n_layers, 3);
        assert_eq!(m.d_model, 64);
        assert_eq!(m.loss.mode, nyoforge_core::model::RegularizerMode::Auxz);
        assert_eq!(m.loss.maxz_coeff, 2e-4);

        let big = RunConfig::parse("[model]\npreset = \"wonton7b\"\n").unwrap().model_config().unwrap();
        assert_eq!((big.d_model, big.n_heads, big.n_layers, big.context_len), (4096, 32, 32, 2048));
        assert_eq!(big.vocab_size, 139_776);

        assert!(RunConfig::parse("[model]\npreset = \"nope\"\n").unwrap().model_config().is_err());
        assert!(RunConfig::parse("[model]\nd_modle = 8\n").unwrap().model_config().is_err());
        assert!(RunConfig::parse("[runtime]\nsed = 1\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = RunConfig::parse(
            "[[datasets]]\nname = \"a\"\nroot = \"data/a\"\nweight = 1.0\n[tokenizer]\npath = \"/abs/tok\"\n",
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/etc/run"));
        assert_eq!(cfg.datasets[0].root, Path::new("/etc/run/data/a"));
        assert_eq!(cfg.datasets[0].file_glob, "*.jsonl");
        assert_eq!(cfg.tokenizer.path.as_deref(), Some(Path::new("/abs/tok")));
        assert_eq!(cfg.runtime.checkpoint_dir, Path::new("/etc/run/checkpoints"));
    }
}
