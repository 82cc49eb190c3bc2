//! `stackvet` command line: gen, train, eval, triage and serve.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use stackvet::datagen::Combo;
use stackvet::models::ModelId;

use config::{Overrides, Paths, RunConfig, SplitName};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Infeasible(_) => EXIT_INFEASIBLE,
            CliError::Other(_) => EXIT_OTHER,
        }
    }
}

impl From<stackvet::Error> for CliError {
    fn from(e: stackvet::Error) -> Self {
        match e {
            stackvet::Error::NoFeasiblePolicy => CliError::Infeasible(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<stackvet_review::ReviewError> for CliError {
    fn from(e: stackvet_review::ReviewError) -> Self {
        CliError::Other(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

/// Flags shared by every subcommand. Each one overrides the matching
/// setting of the `--config` file.
#[derive(Args, Debug, Default)]
pub struct Common {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for generation, splitting, folds and training.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stacking depths, e.g. `32,4`.
    #[arg(long)]
    pub combo: Option<Combo>,
    /// Architecture, cnn1 through cnn6.
    #[arg(long)]
    pub model: Option<ModelId>,
    /// Attention module after each conv block.
    #[arg(long, value_enum)]
    pub cbam: Option<Toggle>,
    /// Review service port.
    #[arg(long)]
    pub port: Option<u16>,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Directory of fold models written by `train`.
    #[arg(long)]
    pub models: Option<PathBuf>,
    /// Scores CSV written by `eval`.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Policy JSON written by `triage`.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Verdict log for `serve` (default: <out>/verdicts.ndjson).
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Number of samples to generate.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Training epochs (patience is clamped to it).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Split evaluated by `eval` and queued by `serve`.
    #[arg(long, value_enum)]
    pub split: Option<SplitName>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic stacked dataset with a 7:1:2 split.
    Gen(Common),
    /// K-fold cross-validation on train+validation; writes one model per fold.
    Train(Common),
    /// Majority-vote ensemble evaluation; writes report, ROC and scores.
    Eval(Common),
    /// Threshold grid search and operating point; exit 3 when infeasible.
    Triage(Common),
    /// HTTP review queue for the human-review band.
    Serve(Common),
}

#[derive(Parser, Debug)]
#[command(name = "stackvet", version, about = "Shift-and-stack candidate vetting pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

impl Common {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            combo: self.combo.clone(),
            model: self.model,
            cbam: self.cbam.map(|t| matches!(t, Toggle::On)),
            port: self.port,
            samples: self.samples,
            epochs: self.epochs,
            folds: self.folds,
            split: self.split,
            paths: Paths {
                data: self.data.clone(),
                models: self.models.clone(),
                scores: self.scores.clone(),
                policy: self.policy.clone(),
                out: self.out.clone(),
                log: self.log.clone(),
            },
        }
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        cfg.apply(&self.overrides());
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and returns its report text.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::Gen(c) => commands::cmd_gen(&c.resolve()?),
        Command::Train(c) => commands::cmd_train(&c.resolve()?),
        Command::Eval(c) => commands::cmd_eval(&c.resolve()?),
        Command::Triage(c) => commands::cmd_triage(&c.resolve()?),
        Command::Serve(c) => commands::cmd_serve(&c.resolve()?),
    }
}
