//! `vqa`: generate triplets, inspect shards, train, evaluate and sample for review.

mod config;
mod evaluate;
mod generate;
mod manifest;
mod review;
mod stats;
mod train;
mod vocab;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "vqa", version, about = "Video question answering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate question-answer triplets from narrated transcripts.
    Generate(generate::GenerateArgs),
    /// Summary statistics of triplet shards.
    Stats(stats::StatsArgs),
    /// Train a model.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Evaluate a checkpoint on a downstream dataset.
    Evaluate(evaluate::EvaluateArgs),
    /// Sample triplets into a CSV sheet for manual judgment.
    SampleReview(review::ReviewArgs),
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Contrastive + MLM pretraining on triplet shards.
    Pretrain(train::PretrainArgs),
    /// Finetune on a downstream split.
    Finetune(train::FinetuneArgs),
    /// Matching-head + MLM pretraining on narration.
    MatchingPretrain(train::MatchingArgs),
}

/// Options shared by the training subcommands.
#[derive(Args, Clone, Debug)]
pub struct CommonTrainArgs {
    /// Profile JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub features: PathBuf,
    /// Output directory for checkpoints, metrics and the manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Accept a checkpoint with missing or extra keys.
    #[arg(long, requires = "init")]
    pub allow_partial: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_clips: Option<usize>,
    #[arg(long)]
    pub videos_per_batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_fraction: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub no_mlm: bool,
    #[arg(long)]
    pub no_dedup: bool,
    /// Language-only variant: video input zeroed and masked.
    #[arg(long)]
    pub qa_t: bool,
}

/// An error caused by the user's input rather than by the program.
#[derive(Debug)]
pub struct InputError(pub String);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

#[macro_export]
macro_rules! input_err {
    ($($t:tt)*) => {
        anyhow::Error::new($crate::InputError(format!($($t)*)))
    };
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<InputError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<vqa_core::Error>() {
            return if e.is_input_error() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Stats(a) => stats::run(a),
        Command::Train(TrainCommand::Pretrain(a)) => train::pretrain(a),
        Command::Train(TrainCommand::Finetune(a)) => train::finetune(a),
        Command::Train(TrainCommand::MatchingPretrain(a)) => train::matching(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::SampleReview(a) => review::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
