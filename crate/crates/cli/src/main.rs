//! `esp`: generate toy models, decode, benchmark, and run diagnostics.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 internal
//! invariant violation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use esp_core::EspError;

#[derive(Parser, Debug)]
#[command(name = "esp", version, about = "Speculative decoding by probing a frozen model with mask embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a weights file.
    GenModel(GenModelArgs),
    /// Decode with the tree drafter and append metrics.
    Decode(DecodeArgs),
    /// Decode with plain autoregression or prompt lookup.
    Baseline(BaselineArgs),
    /// Run AR, PLD, and the tree decoder at BC 10, 30, 60 over a corpus.
    Bench(BenchArgs),
    /// Per-layer cosine traces between mask and true-token hidden states.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo check of the top-K inclusion threshold.
    Lemma(LemmaArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Preset {
    Toy,
    Successor,
}

#[derive(Args, Debug)]
struct GenModelArgs {
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    /// JSON model config (vocab_size, model_dim, num_layers, num_heads,
    /// ffn_dim, rope_base, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Successor preset vocabulary size.
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    /// Successor preset stride.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ModelArg {
    /// Weights file.
    #[arg(long, env = "ESP_MODEL")]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct PromptArgs {
    /// Prompt text (byte tokens).
    #[arg(long, conflicts_with_all = ["prompts", "tokens"])]
    prompt: Option<String>,
    /// Prompt file: JSONL {"id","text"} or one prompt per line.
    #[arg(long, conflicts_with = "tokens")]
    prompts: Option<PathBuf>,
    /// Comma-separated token ids.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<u32>>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum InitArg {
    Mean,
    Lastk,
    Sample,
}

#[derive(Args, Debug, Clone)]
struct SamplingArgs {
    #[arg(long, default_value_t = 0.0)]
    temp: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
    #[arg(long)]
    stop_token: Option<u32>,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    prompt: PromptArgs,
    /// Block complexity: tokens per forward pass.
    #[arg(long, default_value_t = 30)]
    bc: usize,
    /// Mask tokens per tree position.
    #[arg(long = "masks", default_value_t = 1)]
    k: usize,
    /// static:[K1,...], dynamic, or dynamic:<bc>x<k>.
    #[arg(long)]
    branch: Option<String>,
    #[arg(long, value_enum, default_value = "mean")]
    init: InitArg,
    /// Mean shift of sampled masks in units of sigma.
    #[arg(long, default_value_t = 0.0)]
    sample_scale: f32,
    /// Use one pooled sigma for sampled masks.
    #[arg(long)]
    pooled_sigma: bool,
    #[arg(long, default_value_t = 0.1)]
    lambda: f32,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    naive_layout: bool,
    /// Append RunRecords here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum BaselineMethod {
    Ar,
    Pld,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    prompt: PromptArgs,
    #[arg(long, value_enum, default_value = "ar")]
    method: BaselineMethod,
    #[command(flatten)]
    sampling: SamplingArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Suite {
    Default,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArg,
    /// Prompt file; the bundled 50-prompt corpus when omitted.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    suite: Suite,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Run prompts one at a time instead of across threads.
    #[arg(long)]
    sequential: bool,
    /// Output directory for runs.jsonl and summary.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[command(flatten)]
    model: ModelArg,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    horizon: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LemmaArgs {
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    vocab: usize,
    /// Top-K sizes to check.
    #[arg(long = "topk", value_delimiter = ',', default_value = "1,4,8")]
    topk: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sequential: bool,
    /// Summary per K.
    #[arg(long)]
    out: PathBuf,
    /// Per-instance reports for the first trials of each K.
    #[arg(long)]
    samples: Option<PathBuf>,
}

/// A configuration problem detected by the CLI itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<EspError>() {
        Some(e) if e.is_io() => 3,
        Some(
            EspError::InvalidConfig(_)
            | EspError::InvalidBranch(_)
            | EspError::EmptyPrompt
            | EspError::PromptTooShort { .. }
            | EspError::ContextOverflow { .. }
            | EspError::TokenOutOfRange { .. }
            | EspError::HorizonTooLong { .. }
            | EspError::VocabularyExhausted { .. },
        ) => 2,
        Some(EspError::ShapeMismatch(m)) if m.starts_with("weights header") => 3,
        Some(_) => 4,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::Decode(a) => commands::decode(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Bench(a) => commands::bench(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Lemma(a) => commands::lemma(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
