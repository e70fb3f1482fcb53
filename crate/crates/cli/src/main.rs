//! `nyoforge` command-line driver.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure.
//! Machine-readable results go to stdout, diagnostics to stderr.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nyoforge", version, about = "Desk-scale LLM pretraining stack")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Overrides the config seed and NYOFORGE_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Check the configuration, print it resolved and exit.
    #[arg(long)]
    pub validate: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE tokenizer on every configured dataset.
    TokenizerTrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Encode standard input and print token ids.
    Tokenize {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long)]
        bos_eos: bool,
    },
    /// Print compression, fertility and continued-word share as JSON.
    TokenizerStats {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        corpus: PathBuf,
    },
    /// Print the file plan.
    DataPlan {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stream batches for one rank.
    DataStream {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: u64,
        /// Emit batch metadata only, without token rows.
        #[arg(long)]
        dry_run: bool,
    },
    /// Pretrain from scratch or resume from a checkpoint.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory, or a root holding `step-*` directories.
        #[arg(long, value_name = "DIR")]
        resume: Option<PathBuf>,
        /// Stop after this many steps in this invocation.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Fine-tune a checkpoint on question/answer pairs.
    Sft {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "CKPT")]
        init: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Output root; defaults to `<checkpoint_dir>/sft`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime { kind: String, message: String },
}

impl CliError {
    pub fn runtime(kind: &str, message: impl Into<String>) -> Self {
        CliError::Runtime {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    /// Names the error by its type and variant path, e.g.
    /// `TrainError::Stream::NoFilesMatched`.
    pub fn from_error<E: fmt::Debug + fmt::Display>(type_name: &str, e: &E) -> Self {
        let debug = format!("{e:?}");
        let mut kind = type_name.to_string();
        let mut rest = debug.as_str();
        loop {
            let end = rest.find(|c: char| !(c.is_alphanumeric() || c == '_')).unwrap_or(rest.len());
            let ident = &rest[..end];
            if ident.is_empty() || !ident.starts_with(|c: char| c.is_ascii_uppercase()) {
                break;
            }
            kind.push_str("::");
            kind.push_str(ident);
            if ident == "Io" || !rest[end..].starts_with('(') {
                break;
            }
            rest = &rest[end + 1..];
        }
        CliError::runtime(&kind, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime { kind, message } => write!(f, "{kind}: {message}"),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::TokenizerTrain { cfg, out } => commands::tokenizer_train(&cfg, &out),
        Command::Tokenize { model, bos_eos } => commands::tokenize(&model, bos_eos),
        Command::TokenizerStats { model, corpus } => commands::tokenizer_stats(&model, &corpus),
        Command::DataPlan { cfg } => commands::data_plan(&cfg),
        Command::DataStream {
            cfg,
            rank,
            steps,
            dry_run,
        } => commands::data_stream(&cfg, rank, steps, dry_run),
        Command::Pretrain {
            cfg,
            resume,
            stop_after,
        } => commands::pretrain(&cfg, resume.as_deref(), stop_after),
        Command::Sft { cfg, init, data, out } => commands::sft(&cfg, &init, &data, out.as_deref()),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CliError::Usage(_) => ExitCode::from(1),
                CliError::Runtime { .. } => ExitCode::from(2),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nyoforge_core::corpus_stream::StreamError;
    use nyoforge_core::trainer::TrainError;

    #[test]
    fn error_kind_names_nested_variants() {
        let e = TrainError::Stream(StreamError::NoFilesMatched("web".into()));
        match CliError::from_error("TrainError", &e) {
            CliError::Runtime { kind, message } => {
                assert_eq!(kind, "TrainError::Stream::NoFilesMatched");
                assert!(message.contains("web"));
            }
            other => panic!("{other:?}"),
        }
        let e = TrainError::VocabMismatch { tokenizer: 3, model: 4 };
        match CliError::from_error("TrainError", &e) {
            CliError::Runtime { kind, .. } => assert_eq!(kind, "TrainError::VocabMismatch"),
            other => panic!("{other:?}"),
        }
    }
}
