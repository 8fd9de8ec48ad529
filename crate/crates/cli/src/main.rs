mod commands;
mod config;
mod manifest;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tab_core::backbone::BackboneError;
use tab_core::data::DataError;
use tab_core::downstream::DownstreamError;
use tab_core::experiment::ExperimentError;
use tab_core::imaging::CodecError;
use tab_core::prompts::PromptError;
use tab_core::synthesis::SynthError;
use tab_core::trainer::TrainError;

/// Failures raised by the tool itself rather than the library.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
}

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "tab", version, about = "Text-anchored anomaly backbone: data, pre-training and evaluation")]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the procedural toy dataset in MVTec layout.
    GenToy(GenToyArgs),
    /// Write synthetic anomaly triples from a dataset's train normals.
    Synth(SynthArgs),
    /// Expand prompts and embed them with the pseudo text encoder.
    Prompts(PromptsArgs),
    /// Pre-train a backbone against a text embedding bank.
    Pretrain(PretrainArgs),
    /// PaDiM detection and localization AUROC for a checkpoint.
    Eval(EvalArgs),
    /// Linear-probe classification on backbone embeddings.
    Probe(ProbeArgs),
    /// Dump global embeddings of every sample to CSV.
    ExportFeats(ExportArgs),
    /// Compare variants along one axis over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenToyArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// nsa, cutpaste, perlin or mask.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Restrict to one class.
    #[arg(long)]
    pub class: Option<String>,
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Bank output path; the prompt JSON goes beside it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Take class names from a dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated class names.
    #[arg(long)]
    pub classes: Option<String>,
    /// Directory of prompt asset text files.
    #[arg(long)]
    pub assets: Option<PathBuf>,
    #[arg(long)]
    pub setting: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// Prompt JSON path; defaults to `<out stem>.prompts.json`.
    #[arg(long)]
    pub prompts_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub bank: Option<PathBuf>,
    /// Best-loss checkpoint; the final one is written as `<stem>.final.<ext>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Synthesis method.
    #[arg(long)]
    pub method: Option<String>,
    /// two_sided, normal_only or classification.
    #[arg(long)]
    pub mode: Option<String>,
    /// Per-epoch JSON lines; defaults to `<out>.train.jsonl`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "padim")]
    pub method: String,
    /// Comma-separated stage indices.
    #[arg(long)]
    pub stages: Option<String>,
    /// Report path; the report is always printed to stdout as well.
    #[arg(long, alias = "report")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Probe the untrained network for `--seed` instead of a checkpoint.
    #[arg(long, conflicts_with = "ckpt")]
    pub random_init: bool,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Dataset whose test split trains the probe (defect labels only).
    #[arg(long)]
    pub fit_data: Option<PathBuf>,
    /// `defect` (good plus defect kinds) or `class`.
    #[arg(long, default_value = "defect")]
    pub labels: String,
    /// Fine-tune the backbone with the head.
    #[arg(long)]
    pub unfreeze: bool,
    #[arg(long, alias = "report")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// synth, align or prompt.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated variants of the axis; all when omitted.
    #[arg(long, alias = "variants")]
    pub methods: Option<String>,
    /// Comma-separated seeds; overrides `--seed`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Replaces the pseudo bank on the synth and align axes.
    #[arg(long)]
    pub bank: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Also score the untrained network of each seed.
    #[arg(long)]
    pub random_baseline: bool,
    #[arg(long, alias = "report")]
    pub out: Option<PathBuf>,
}

fn code_backbone(e: &BackboneError) -> u8 {
    match e {
        BackboneError::Config(_) => EXIT_CONFIG,
        BackboneError::Format { .. } | BackboneError::Io { .. } => EXIT_DATA,
        BackboneError::Tensor(_) => 1,
    }
}

fn code_synth(e: &SynthError) -> u8 {
    match e {
        SynthError::Config(_) => EXIT_CONFIG,
        SynthError::Contract(_) => 1,
    }
}

fn code_prompt(e: &PromptError) -> u8 {
    match e {
        PromptError::Config(_) | PromptError::Encoder { .. } => EXIT_CONFIG,
        PromptError::Io { .. } | PromptError::Format { .. } => EXIT_DATA,
    }
}

fn code_train(e: &TrainError) -> u8 {
    match e {
        TrainError::Config(_) => EXIT_CONFIG,
        TrainError::Tensor(_) => 1,
        TrainError::Backbone(b) => code_backbone(b),
        TrainError::Synthesis(s) => code_synth(s),
    }
}

fn code_downstream(e: &DownstreamError) -> u8 {
    match e {
        DownstreamError::Config(_) => EXIT_CONFIG,
        DownstreamError::Statistics(_) | DownstreamError::Metric(_) | DownstreamError::Io { .. } => EXIT_DATA,
        DownstreamError::Backbone(b) => code_backbone(b),
        DownstreamError::Tensor(_) => 1,
    }
}

fn code_data(e: &DataError) -> u8 {
    match e {
        DataError::Config(_) => EXIT_CONFIG,
        DataError::Synthesis(s) => code_synth(s),
        _ => EXIT_DATA,
    }
}

/// 2 for configuration problems, 3 for unreadable or unusable data, 1 for
/// anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let code = if let Some(e) = cause.downcast_ref::<CliError>() {
            match e {
                CliError::Config(_) => EXIT_CONFIG,
                CliError::Data(_) => EXIT_DATA,
            }
        } else if let Some(e) = cause.downcast_ref::<DataError>() {
            code_data(e)
        } else if let Some(e) = cause.downcast_ref::<TrainError>() {
            code_train(e)
        } else if let Some(e) = cause.downcast_ref::<DownstreamError>() {
            code_downstream(e)
        } else if let Some(e) = cause.downcast_ref::<ExperimentError>() {
            match e {
                ExperimentError::Config(_) => EXIT_CONFIG,
                ExperimentError::Train(t) => code_train(t),
                ExperimentError::Downstream(d) => code_downstream(d),
                ExperimentError::Prompt(p) => code_prompt(p),
            }
        } else if let Some(e) = cause.downcast_ref::<PromptError>() {
            code_prompt(e)
        } else if let Some(e) = cause.downcast_ref::<BackboneError>() {
            code_backbone(e)
        } else if let Some(e) = cause.downcast_ref::<SynthError>() {
            code_synth(e)
        } else if cause.is::<CodecError>() || cause.is::<std::io::Error>() {
            EXIT_DATA
        } else {
            continue;
        };
        return code;
    }
    1
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("TAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("TAB_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let mut cfg = config::FileConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    match cli.command {
        Command::GenToy(a) => commands::gen_toy(a, cfg),
        Command::Synth(a) => commands::synth(a, cfg),
        Command::Prompts(a) => commands::prompts(a, cfg),
        Command::Pretrain(a) => commands::pretrain(a, cfg),
        Command::Eval(a) => commands::eval(a, cfg),
        Command::Probe(a) => commands::probe(a, cfg),
        Command::ExportFeats(a) => commands::export_feats(a, cfg),
        Command::Ablate(a) => commands::ablate(a, cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        // usage errors exit 2, --help and --version exit 0
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
