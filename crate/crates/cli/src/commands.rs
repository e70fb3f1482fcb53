use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use nyoforge_core::corpus_stream::{plan_stream, read_record_texts, StreamError, StreamPlan};
use nyoforge_core::scheduler::{DataStream, StreamCheckpoint, TokenBatch};
use nyoforge_core::sft::{load_chat_jsonl, sft_run};
use nyoforge_core::tokenizer::{compute_metrics, train_bpe_detailed, TokenizerModel, TrainerOptions};
use nyoforge_core::trainer::{
    load_checkpoint, save_checkpoint, train_loop, BatchSource, LoopOptions, Trainer,
};
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, ConfigArgs};

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::runtime("IoError", format!("{}: {e}", path.display()))
}

fn print_json(value: &serde_json::Value) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    serde_json::to_writer(&mut out, value).map_err(|e| CliError::runtime("IoError", e.to_string()))?;
    writeln!(out).map_err(|e| CliError::runtime("IoError", e.to_string()))
}

/// Loads and validates the config; `Ok(None)` means `--validate` handled it.
fn load_config(args: &ConfigArgs, tokenizer_must_exist: bool) -> Result<Option<RunConfig>, CliError> {
    let cfg = RunConfig::load(&args.config, args.seed)?;
    cfg.validate(tokenizer_must_exist)?;
    if args.validate {
        let resolved = json!({
            "valid": true,
            "seed": cfg.runtime.seed,
            "datasets": cfg.datasets,
            "tokenizer": cfg.tokenizer,
            "model": cfg.model_config()?,
            "optim": cfg.optim,
            "runtime": cfg.runtime,
            "sft": cfg.sft,
        });
        print_json(&resolved)?;
        return Ok(None);
    }
    Ok(Some(cfg))
}

fn load_tokenizer(path: &Path) -> Result<TokenizerModel, CliError> {
    TokenizerModel::load(path).map_err(|e| CliError::from_error("TokenizerError", &e))
}

fn plan(cfg: &RunConfig) -> Result<StreamPlan, CliError> {
    plan_stream(&cfg.datasets, cfg.runtime.seed, cfg.runtime.world_size)
        .map_err(|e| CliError::from_error("StreamError", &e))
}

pub fn tokenizer_train(args: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let Some(cfg) = load_config(args, false)? else {
        return Ok(());
    };
    let plan = plan(&cfg)?;
    let mut texts = Vec::new();
    let mut malformed = 0;
    for dataset in &plan.datasets {
        let mut files = dataset.files.clone();
        files.sort();
        for file in files {
            let (t, stats) = read_record_texts(&file).map_err(|e| CliError::from_error("StreamError", &e))?;
            malformed += stats.malformed_lines.len();
            texts.extend(t);
        }
    }
    if malformed > 0 {
        log::warn!("{malformed} malformed records skipped");
    }
    let options = TrainerOptions {
        target_vocab_size: cfg.tokenizer_vocab_size()?,
        min_char_frequency: cfg.tokenizer.min_char_frequency,
    };
    let (model, merges) =
        train_bpe_detailed(&texts, &options).map_err(|e| CliError::from_error("TokenizerError", &e))?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    model.save(out).map_err(|e| CliError::from_error("TokenizerError", &e))?;
    print_json(&json!({
        "out": out,
        "vocab_size": model.vocab_size(),
        "merges": merges.len(),
        "documents": texts.len(),
    }))
}

pub fn tokenize(model: &Path, bos_eos: bool) -> Result<(), CliError> {
    let tok = load_tokenizer(model)?;
    let mut text = String::new();
    io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| CliError::runtime("IoError", format!("stdin: {e}")))?;
    let ids = tok.encode(&text, bos_eos);
    let line = ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ");
    println!("{line}");
    Ok(())
}

/// `.jsonl` files contribute their `text` fields; any other file contributes
/// its non-blank lines.
fn corpus_texts(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut texts = Vec::new();
    for file in sorted_files(dir)? {
        if file.extension().is_some_and(|e| e == "jsonl") {
            let (t, _) = read_record_texts(&file).map_err(|e| CliError::from_error("StreamError", &e))?;
            texts.extend(t);
        } else {
            let content = fs::read_to_string(&file).map_err(|e| io_error(&file, e))?;
            texts.extend(content.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
        }
    }
    Ok(texts)
}

pub fn tokenizer_stats(model: &Path, corpus: &Path) -> Result<(), CliError> {
    let tok = load_tokenizer(model)?;
    let texts = corpus_texts(corpus)?;
    let metrics = compute_metrics(&tok, &texts).map_err(|e| CliError::from_error("TokenizerError", &e))?;
    print_json(&serde_json::to_value(metrics).expect("metrics serialize"))
}

pub fn data_plan(args: &ConfigArgs) -> Result<(), CliError> {
    let Some(cfg) = load_config(args, false)? else {
        return Ok(());
    };
    let plan = plan(&cfg)?;
    let datasets: Vec<_> = plan
        .datasets
        .iter()
        .enumerate()
        .map(|(d, ds)| {
            json!({
                "name": ds.name,
                "weight": ds.weight,
                "files": ds.files.len(),
                "rank_file_counts": (0..plan.world_size).map(|r| plan.rank_files(d, r).len()).collect::<Vec<_>>(),
                "file_order": ds.files,
            })
        })
        .collect();
    print_json(&json!({
        "seed": plan.seed,
        "world_size": plan.world_size,
        "datasets": datasets,
    }))
}

fn open_stream(
    cfg: &RunConfig,
    rank: usize,
    context_len: usize,
    checkpoint: Option<&StreamCheckpoint>,
) -> Result<DataStream, CliError> {
    let tok = Arc::new(load_tokenizer(cfg.tokenizer_path()?)?);
    let plan = plan(cfg)?;
    DataStream::open(&plan, rank, tok, &cfg.stream_config(context_len), checkpoint)
        .map_err(|e| CliError::from_error("StreamError", &e))
}

pub fn data_stream(args: &ConfigArgs, rank: Option<usize>, steps: u64, dry_run: bool) -> Result<(), CliError> {
    let Some(cfg) = load_config(args, true)? else {
        return Ok(());
    };
    let rank = rank.unwrap_or(cfg.runtime.rank);
    if rank >= cfg.runtime.world_size {
        return Err(CliError::Usage(format!("--rank {rank} out of range for world_size {}", cfg.runtime.world_size)));
    }
    let mut stream = open_stream(&cfg, rank, cfg.model_config()?.context_len, None)?;
    let mut out = BufWriter::new(io::stdout().lock());
    let write_err = |e: io::Error| CliError::runtime("IoError", e.to_string());
    for step in 0..steps {
        let Some(batch) = stream.next_batch().map_err(|e| CliError::from_error("StreamError", &e))? else {
            break;
        };
        let mut line = json!({ "step": step, "metadata": batch.metadata });
        if !dry_run {
            line["tokens"] = json!(batch.sequences.iter().map(|s| &s.tokens).collect::<Vec<_>>());
        }
        serde_json::to_writer(&mut out, &line).map_err(|e| CliError::runtime("IoError", e.to_string()))?;
        writeln!(out).map_err(write_err)?;
    }
    out.flush().map_err(write_err)?;
    eprintln!("{}", serde_json::to_string(stream.stats()).expect("stats serialize"));
    Ok(())
}

/// Re-reads dataset weights from the config file whenever it changes.
struct ReloadingStream {
    stream: DataStream,
    config: PathBuf,
    modified: Option<SystemTime>,
}

impl ReloadingStream {
    fn new(stream: DataStream, config: &Path) -> Self {
        let modified = fs::metadata(config).and_then(|m| m.modified()).ok();
        Self {
            stream,
            config: config.to_path_buf(),
            modified,
        }
    }

    fn reload(&mut self) {
        let modified = fs::metadata(&self.config).and_then(|m| m.modified()).ok();
        if modified == self.modified {
            return;
        }
        self.modified = modified;
        let names = self.stream.mux().names().to_vec();
        let cfg = match fs::read_to_string(&self.config).map_err(|e| e.to_string()).and_then(|t| {
            RunConfig::parse(&t).map_err(|e| e.to_string())
        }) {
            Ok(cfg) => cfg,
            Err(e) => {
                log::warn!("config reload failed, keeping weights: {e}");
                return;
            }
        };
        let weights: Option<Vec<f64>> = names
            .iter()
            .map(|n| cfg.datasets.iter().find(|d| &d.name == n).map(|d| d.weight))
            .collect();
        match weights.map(|w| self.stream.set_weights(w)) {
            Some(Ok(())) => log::info!("dataset weights reloaded"),
            Some(Err(e)) => log::warn!("rejected reloaded weights: {e}"),
            None => log::warn!("reloaded config changed the dataset list; weights kept"),
        }
    }
}

impl BatchSource for ReloadingStream {
    fn next_batch(&mut self) -> Result<Option<TokenBatch>, StreamError> {
        self.reload();
        self.stream.next_batch()
    }

    fn stream_checkpoint(&self) -> Option<StreamCheckpoint> {
        Some(self.stream.checkpoint())
    }

    fn at_file_boundary(&self) -> bool {
        self.stream.at_file_boundary()
    }

    fn vocab_size(&self) -> Option<usize> {
        Some(self.stream.vocab_size())
    }
}

fn open_log(path: Option<&Path>, append: bool) -> Result<Option<BufWriter<File>>, CliError> {
    let Some(path) = path else {
        return Ok(None);
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| io_error(path, e))?;
    Ok(Some(BufWriter::new(file)))
}

pub fn pretrain(args: &ConfigArgs, resume: Option<&Path>, stop_after: Option<u64>) -> Result<(), CliError> {
    let Some(cfg) = load_config(args, true)? else {
        return Ok(());
    };
    let train_err = |e| CliError::from_error("TrainError", &e);
    let (mut trainer, stream_ckpt) = match resume {
        Some(dir) => {
            let loaded = load_checkpoint(dir).map_err(train_err)?;
            if !loaded.manifest.at_file_boundary {
                log::warn!("resuming from a mid-file checkpoint; partly read files will be replayed");
            }
            if loaded.model_config != cfg.model_config()? {
                log::warn!("model section differs from the checkpoint; using the checkpoint's model");
            }
            let stream = loaded.stream.clone();
            (Trainer::from_checkpoint(loaded, cfg.optim.clone()).map_err(train_err)?, stream)
        }
        None => (
            Trainer::new(cfg.model_config()?, cfg.optim.clone(), cfg.runtime.base_std, cfg.runtime.seed)
                .map_err(train_err)?,
            None,
        ),
    };
    let stream = open_stream(
        &cfg,
        cfg.runtime.rank,
        trainer.model_config.context_len,
        stream_ckpt.as_ref(),
    )?;
    let mut source = ReloadingStream::new(stream, &args.config);
    let opts = LoopOptions {
        checkpoint_dir: Some(cfg.runtime.checkpoint_dir.clone()),
        checkpoint_every: cfg.runtime.checkpoint_every,
        stop_after,
    };
    let mut log = open_log(cfg.runtime.log_path.as_deref(), resume.is_some())?;
    let summary = train_loop(&mut trainer, &mut source, &opts, log.as_mut()).map_err(train_err)?;
    print_json(&serde_json::to_value(&summary).expect("summary serialize"))
}

pub fn sft(args: &ConfigArgs, init: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let Some(cfg) = load_config(args, true)? else {
        return Ok(());
    };
    let sft_err = |e| CliError::from_error("SftError", &e);
    let loaded = load_checkpoint(init).map_err(|e| CliError::from_error("TrainError", &e))?;
    let tok = load_tokenizer(cfg.tokenizer_path()?)?;
    let dataset = load_chat_jsonl(data).map_err(sft_err)?;
    let model_config = loaded.model_config;
    let mut params = loaded.params;
    let mut log = open_log(cfg.runtime.log_path.as_deref(), false)?;
    let outcome = sft_run(&model_config, &mut params, &tok, &dataset, &cfg.sft, log.as_mut()).map_err(sft_err)?;
    let root = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.runtime.checkpoint_dir.join("sft"));
    let dir = save_checkpoint(&root, &model_config, &params, &outcome.state, None, true)
        .map_err(|e| CliError::from_error("TrainError", &e))?;
    print_json(&json!({
        "checkpoint": dir,
        "steps": outcome.steps,
        "epochs": outcome.epochs,
        "skipped_too_long": outcome.skipped_too_long,
        "first_loss": outcome.reports.first().map(|r| r.loss.total),
        "last_loss": outcome.reports.last().map(|r| r.loss.total),
    }))
}

pub fn inspect(checkpoint: &Path) -> Result<(), CliError> {
    let loaded = load_checkpoint(checkpoint).map_err(|e| CliError::from_error("TrainError", &e))?;
    let stream = loaded.stream.as_ref().map(|s| {
        json!({
            "completed_files": s.completed_count(),
            "per_dataset_rank": s.completed.iter().map(|c| json!({
                "dataset": c.dataset,
                "rank": c.rank,
                "completed": c.files.len(),
            })).collect::<Vec<_>>(),
            "sequences_emitted": s.sequences_emitted,
        })
    });
    print_json(&json!({
        "dir": loaded.dir,
        "step": loaded.manifest.step,
        "manifest": loaded.manifest,
        "model": loaded.model_config,
        "parameters": loaded.params.num_params(),
        "stream": stream,
    }))
}

/// Every regular file below `dir`, sorted by path.
fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::runtime("IoError", e.to_string()))?;
        if entry.file_type().is_file() {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}
