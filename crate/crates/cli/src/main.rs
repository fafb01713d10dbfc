mod commands;
mod evaluate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mvrg::kgrg::DecodeMode;

#[derive(Debug, Parser)]
#[command(
    name = "mvrg",
    version,
    about = "Multi-view contrastive pretraining and report generation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; unspecified fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Validate the configuration and inputs, then exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic corpus as train/val/test manifests.
    Synth(Common),
    /// Stage-1 contrastive pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Stage-2 report-generation finetuning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Start from random encoders when no Stage-1 checkpoint is given.
        #[arg(long)]
        allow_cold_start: bool,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Generate reports for every study in a manifest.
    Generate {
        /// Stage-2 checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "greedy")]
        mode: DecodeMode,
        /// Generations JSONL; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a generations JSONL file.
    Evaluate {
        #[arg(long)]
        input: PathBuf,
        /// Directory for `metrics.json` and the F1 tables; stdout only when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated observation names for the five-observation F1 table.
        #[arg(long, value_delimiter = ',')]
        ce5: Option<Vec<String>>,
    },
}

/// Failure class, mapped to the process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Self::Usage(e) | Self::Data(e) | Self::Numerical(e) => e,
        }
    }
}

impl From<mvrg::train::TrainError> for Failure {
    fn from(e: mvrg::train::TrainError) -> Self {
        use mvrg::train::TrainError as E;
        match e {
            E::Numerical { .. } => Self::Numerical(e.into()),
            E::Config(_) | E::MissingStage1 => Self::Usage(e.into()),
            _ => Self::Data(e.into()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Synth(common) => commands::synth(&common),
        Command::Pretrain { common, resume } => commands::pretrain(&common, resume),
        Command::Finetune {
            common,
            stage1,
            allow_cold_start,
            resume,
        } => commands::finetune(
            &common,
            mvrg::train::FinetuneInit {
                stage1,
                allow_cold_start,
                resume,
            },
        ),
        Command::Generate {
            checkpoint,
            manifest,
            mode,
            out,
        } => commands::generate(&checkpoint, &manifest, mode, out.as_deref()),
        Command::Evaluate { input, out, ce5 } => {
            evaluate::run(&input, out.as_deref(), ce5.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
