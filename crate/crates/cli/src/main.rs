//! `faultloc`: run the localization pipeline over fault bundles on disk.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use faultloc_core::OrderStrategy;

/// Exit codes.
pub const EXIT_PIPELINE: u8 = 2;
pub const EXIT_INPUT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "faultloc", version, about = "Multi-agent fault localization over coverage spectra and call graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Localize the fault of one or more bundles.
    Localize(LocalizeArgs),
    /// Score ranking files against ground truth (Top-1/3/5/10).
    Evaluate(EvaluateArgs),
    /// Show coverage stats, the Ochiai top-k and the division plan; no backend calls.
    Inspect(InspectArgs),
    /// Run several pipeline configurations over a corpus and compare Top-N.
    Experiment(ExperimentArgs),
    /// Write a scripted synthetic corpus.
    Synth(SynthArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    /// Replay the bundle's (or `--mock-script`'s) scripted replies.
    Mock,
    /// OpenAI-compatible endpoint configured through FL_API_KEY, FL_API_BASE_URL, FL_MODEL.
    Remote,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Text,
    Json,
}

/// Flags that mirror `PipelineConfig`; each overrides the `--config` file.
#[derive(Args, Debug, Clone, Default)]
pub struct PipelineFlags {
    /// TOML file with PipelineConfig fields.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub no_navigation: bool,
    #[arg(long)]
    pub no_division: bool,
    #[arg(long)]
    pub no_reflexion: bool,
    /// Method order before division: execution, ochiai or external.
    #[arg(long, value_name = "STRATEGY")]
    pub order: Option<OrderStrategy>,
    /// Context window in tokens.
    #[arg(long, value_name = "TOKENS")]
    pub token_limit: Option<usize>,
    #[arg(long, value_name = "N")]
    pub reflexion_iters: Option<u32>,
    #[arg(long, value_name = "N")]
    pub max_tool_calls: Option<usize>,
    /// Directory of `<template id>.txt` prompt overrides.
    #[arg(long, value_name = "DIR")]
    pub prompts: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BackendFlags {
    #[arg(long, value_enum, default_value_t = BackendKind::Mock)]
    pub backend: BackendKind,
    /// Mock script to use instead of each bundle's own.
    #[arg(long, value_name = "FILE")]
    pub mock_script: Option<PathBuf>,
    /// Bundles processed in parallel.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub jobs: usize,
}

#[derive(Args, Debug)]
pub struct LocalizeArgs {
    /// Bundle directory; repeat for several.
    #[arg(long, required = true, value_name = "DIR")]
    pub bundle: Vec<PathBuf>,
    /// Output directory; several bundles get one subdirectory each.
    #[arg(long, default_value = "out", value_name = "DIR")]
    pub out: PathBuf,
    /// JSON map of method id to score, for `--order external`.
    #[arg(long, value_name = "FILE")]
    pub external_scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Directory of ranking files (`*.json`, or `<fault>/ranking.json`).
    #[arg(long, value_name = "DIR")]
    pub rankings: PathBuf,
    /// Ground-truth file.
    #[arg(long, value_name = "FILE")]
    pub truth: PathBuf,
    /// Also write the JSON report here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(value_name = "BUNDLE")]
    pub bundle: PathBuf,
    /// Ochiai entries to list.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    #[arg(long, value_name = "FILE")]
    pub external_scores: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// full, w/o navigation, w/o division, w/o reflexion.
    Ablation,
    /// execution, ochiai and external orders.
    Ordering,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Corpus directory: one bundle per subdirectory plus truth.json.
    #[arg(long, value_name = "DIR")]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Ablation)]
    pub preset: Preset,
    /// Explicit TOML configs to compare instead of a preset; the first is the baseline.
    #[arg(long = "run-config", value_name = "FILE")]
    pub run_configs: Vec<PathBuf>,
    /// Write the JSON table here.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
    #[command(flatten)]
    pub pipeline: PipelineFlags,
    #[command(flatten)]
    pub backend: BackendFlags,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub faults: usize,
    #[arg(long, default_value_t = 12)]
    pub methods: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Script the mock to mislead the undivided prioritization.
    #[arg(long)]
    pub degrade_undivided: bool,
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn input(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            error: error.into(),
        }
    }

    pub fn pipeline(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_PIPELINE,
            error: error.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Localize(args) => commands::localize(&args),
        Command::Evaluate(args) => commands::evaluate(&args),
        Command::Inspect(args) => commands::inspect(&args),
        Command::Experiment(args) => commands::experiment(&args),
        Command::Synth(args) => commands::synth(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}
