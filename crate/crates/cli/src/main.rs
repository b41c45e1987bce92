//! `plab` — generate → train → gate → sweep → analyze → report.
//!
//! Exit codes: 0 success, 1 other failure (including a failed oracle check),
//! 2 configuration error, 3 trigger efficacy gate not passed, 4 missing or
//! stale artifact.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plab::corpus::LangId;
use plab::LabError;

use commands::ModeArg;
use config::{Overrides, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Debug, Parser)]
#[command(name = "plab", version, about = "Backdoor-trigger activation patching laboratory")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Top-k head set size.
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Shuffled-baseline trials.
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate languages, triggers, passages and patching examples.
    GenCorpus,
    /// Train on the poisoned stream, then measure trigger efficacy.
    Train,
    /// Re-measure trigger efficacy; exits 3 when the gate fails.
    EvalTrigger,
    /// Head-wise mean-activation patching.
    PatchHeads {
        #[arg(long, value_enum, default_value = "trigger")]
        mode: ModeArg,
        #[arg(long, default_value = "fr")]
        lang: LangId,
    },
    /// Layer × trigger-position patching.
    PatchLayers {
        #[arg(long, value_enum, default_value = "trigger")]
        mode: ModeArg,
        #[arg(long, default_value = "fr")]
        lang: LangId,
    },
    /// Top-k head sets, Jaccard matrices and heatmaps.
    Overlap,
    /// Check the patcher against the hand-built oracle model.
    OracleValidate {
        /// Patch this many positions too early (checks that a broken
        /// patcher is caught).
        #[arg(long, default_value_t = 0, hide = true)]
        mutate_position_offset: usize,
    },
    /// Verify every artifact's hash chain and write the Markdown report.
    Report,
}

fn exit_code(e: &LabError) -> u8 {
    match e {
        LabError::InvalidConfig(_)
        | LabError::InvalidArgument(_)
        | LabError::KExceedsGridSize { .. }
        | LabError::MissingTriggerSpan(_)
        | LabError::InvalidExamples(_)
        | LabError::EmptyExampleSet => 2,
        LabError::GateNotPassed(_) => 3,
        LabError::MissingArtifact(_) | LabError::BadCheckpoint(_) => 4,
        LabError::IoFailure { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<bool, LabError> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        k: cli.k,
        trials: cli.trials,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenCorpus => commands::gen_corpus(&cfg)?,
        Command::Train => commands::train_cmd(&cfg)?,
        Command::EvalTrigger => commands::eval_trigger(&cfg)?,
        Command::PatchHeads { mode, lang } => commands::patch_heads(&cfg, mode, lang)?,
        Command::PatchLayers { mode, lang } => commands::patch_layers(&cfg, mode, lang)?,
        Command::Overlap => commands::overlap(&cfg)?,
        Command::OracleValidate {
            mutate_position_offset,
        } => return commands::oracle_validate(&cfg, mutate_position_offset),
        Command::Report => commands::report_cmd(&cfg)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
