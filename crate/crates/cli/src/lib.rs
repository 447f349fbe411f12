//! Command-line pipeline: synthetic data, splits, accent identifier training and
//! evaluation, generator training, synthesis and scoring, all inside one run directory.
pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};

pub use config::{load_config, validate_config, ConfigSource, Profile, RunConfig, Violation};
pub use error::{CliError, CliResult};
pub use rundir::{RunDir, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "accentkit", version, about = "Speaker-disentangled accent identification and accent-conditioned generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML configuration; sections corpus, split, augment, aid, probe, gen, eval.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Base profile the file and overrides apply to.
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,

    /// Override one value, e.g. `--set aid.alpha=0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long, global = true, default_value = "run")]
    pub run_dir: PathBuf,

    /// Seed applied to every section.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its factor table.
    GenerateData,
    /// Build speaker-disjoint splits.
    Split,
    /// Train the accent identifier.
    TrainAid,
    /// Score the accent identifier on seen and unseen test speakers.
    EvalAid,
    /// Write test-unseen accent embeddings for external projection.
    ExportEmbeddings,
    /// Train the speaker probe and the accent-conditioned generator.
    TrainGen,
    /// Build evaluation scenarios and synthesize them.
    Synth,
    /// Score synthesized outputs under two accent identifiers.
    EvalGen,
    /// Train and compare the six accumulative accent-identifier variants.
    Ablate,
    /// List configuration violations without running anything.
    ValidateConfig,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::Split => "split",
            Command::TrainAid => "train-aid",
            Command::EvalAid => "eval-aid",
            Command::ExportEmbeddings => "export-embeddings",
            Command::TrainGen => "train-gen",
            Command::Synth => "synth",
            Command::EvalGen => "eval-gen",
            Command::Ablate => "ablate",
            Command::ValidateConfig => "validate-config",
        }
    }
}

/// Runs one command and returns the text to print.
pub fn run(cli: &Cli) -> CliResult<String> {
    let source = ConfigSource {
        profile: cli.profile,
        file: cli.config.as_deref(),
        overrides: &cli.overrides,
        seed: cli.seed,
    };
    if cli.command == Command::ValidateConfig {
        let violations = match &cli.config {
            Some(path) if cli.overrides.is_empty() && cli.profile.is_none() && cli.seed.is_none() => validate_config(path)?,
            _ => match load_config(&source) {
                Ok(c) => c.violations(),
                Err(CliError::Config(msg)) => vec![Violation::new("config", msg)],
                Err(e) => return Err(e),
            },
        };
        return if violations.is_empty() {
            Ok("configuration is valid".into())
        } else {
            Err(CliError::Invalid(violations))
        };
    }

    let config = load_config(&source)?;
    config.validate()?;
    let run_dir = RunDir::open(&cli.run_dir)?;
    let started = Instant::now();
    let stage = match cli.command {
        Command::GenerateData => commands::generate_data(&run_dir, &config)?,
        Command::Split => commands::split(&run_dir, &config)?,
        Command::TrainAid => commands::train_aid_stage(&run_dir, &config)?,
        Command::EvalAid => commands::eval_aid(&run_dir, &config)?,
        Command::ExportEmbeddings => commands::export_embeddings_stage(&run_dir, &config)?,
        Command::TrainGen => commands::train_gen(&run_dir, &config)?,
        Command::Synth => commands::synth(&run_dir, &config)?,
        Command::EvalGen => commands::eval_gen(&run_dir, &config)?,
        Command::Ablate => commands::ablate(&run_dir, &config)?,
        Command::ValidateConfig => unreachable!("handled above"),
    };
    run_dir.record_stage(cli.command.name(), &config.hash(), &stage.artifacts, started.elapsed().as_secs_f64())?;
    Ok(format!("{}: {}", cli.command.name(), stage.summary))
}
