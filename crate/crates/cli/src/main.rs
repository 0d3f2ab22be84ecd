//! `cobra-lite`: generate corpora, pretrain, embed, evaluate and export.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad configuration, 3 missing
//! files, 4 numerical divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cobra_core::encoder::InferenceMode;
use cobra_core::{Error, ErrorCategory};

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub category: &'static str,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: 2, category: "config", message: message.into() }
    }
    pub fn missing(message: impl Into<String>) -> Self {
        CliError { code: 3, category: "missing-file", message: message.into() }
    }
    pub fn other(message: impl Into<String>) -> Self {
        CliError { code: 1, category: "error", message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        match e.category() {
            ErrorCategory::Config => CliError::config(message),
            ErrorCategory::MissingFile => CliError::missing(message),
            ErrorCategory::Divergence => CliError { code: 4, category: "divergence", message },
            ErrorCategory::Other => CliError::other(message),
        }
    }
}

#[derive(Parser)]
#[command(name = "cobra-lite", version = cobra_core::checkpoint::CODE_VERSION)]
#[command(about = "Contrastive slide-embedding toolkit for bags of patch features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic planted-structure corpus.
    Generate(GenerateArgs),
    /// Momentum-contrastive pretraining; writes metrics.csv and checkpoint.ckpt.
    Pretrain(PretrainArgs),
    /// Encode every patient of a corpus; writes embeddings.json.
    Embed(EmbedArgs),
    /// MLP cross-validation; writes eval_mlp.csv and eval_mlp.txt.
    EvalMlp(EvalMlpArgs),
    /// Few-shot linear probes; writes eval_fewshot.csv and eval_fewshot.txt.
    EvalFewshot(EvalFewshotArgs),
    /// Per-tile attention weights of one patient as CSV and PGM.
    AttnExport(AttnArgs),
    /// Patient embeddings as TSV for external projection tools.
    DumpEmbeddings(DumpArgs),
}

#[derive(Args, Clone)]
pub struct Common {
    /// TOML or JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then COBRA_LITE_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long)]
    pub patients_per_class: Option<usize>,
    #[arg(long)]
    pub class_separation: Option<f64>,
    /// Id prefix, e.g. `ext-` for an external cohort.
    #[arg(long)]
    pub patient_prefix: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model size when the config has no `[model]` section.
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup_epochs: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Args, Clone)]
pub struct Source {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Precomputed `embeddings.json` instead of corpus + checkpoint.
    #[arg(long, conflicts_with_all = ["corpus", "checkpoint"])]
    pub embeddings: Option<PathBuf>,
    /// enc, single-fm or combined-fm.
    #[arg(long)]
    pub mode: Option<InferenceMode>,
    /// Extractor whose rows form the payload (defaults to the first one).
    #[arg(long)]
    pub payload: Option<String>,
    /// Magnification in µm/px (defaults to the first one).
    #[arg(long)]
    pub magnification: Option<f64>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
}

#[derive(Args)]
pub struct EvalMlpArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    /// Held-out corpus every fold's classifier is deployed on.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Held-out `embeddings.json`.
    #[arg(long, conflicts_with = "external")]
    pub external_embeddings: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args)]
pub struct EvalFewshotArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
    /// Shots per class, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shots: Option<Vec<usize>>,
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Args)]
pub struct AttnArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub patient: String,
    #[arg(long)]
    pub extractor: Option<String>,
    #[arg(long)]
    pub magnification: Option<f64>,
    /// Skip the PGM raster.
    #[arg(long)]
    pub no_raster: bool,
}

#[derive(Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub source: Source,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::EvalMlp(a) => commands::eval_mlp(&a),
        Command::EvalFewshot(a) => commands::eval_fewshot(&a),
        Command::AttnExport(a) => commands::attn_export(&a),
        Command::DumpEmbeddings(a) => commands::dump_embeddings(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cobra-lite: {} error: {}", e.category, e.message);
            ExitCode::from(e.code)
        }
    }
}
