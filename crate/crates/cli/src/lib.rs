//! `itfit` command-line front end.
//!
//! Every subcommand resolves a [`RunConfig`] (defaults, then `--config`
//! TOML, then flags), echoes it to stderr, writes its artifacts under
//! `--out`, and finishes with `run_meta.json`.

// NaN-rejecting checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod plot;
pub mod table;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub use config::{ConfigArgs, RunConfig};

/// Bad or missing inputs; the binary exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct InputError(pub String);

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_FAILURE: u8 = 1;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<InputError>()) {
        EXIT_INPUT
    } else {
        EXIT_FAILURE
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "itfit",
    version,
    about = "Neural predictivity benchmarking for spatially mapped IT recordings"
)]
pub struct Cli {
    /// TOML file with settings; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub settings: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with known ground truth
    Synth(commands::synth::SynthArgs),
    /// Noise ceilings for every time bin
    Ceiling,
    /// Cross-validated fits for every model layer
    Fit(commands::score::ScoreArgs),
    /// Full pipeline: ceilings, best bin, layer fits, brain score
    Score(commands::score::ScoreArgs),
    /// Pareto front and scatter plot for one score table
    Pareto(commands::report::ParetoArgs),
    /// Harmonization loss breakdown for a toy network
    HarmonizeEval(commands::harmonize::HarmonizeArgs),
    /// Concepts from NMF of predicted activities
    Craft(commands::craft::CraftArgs),
    /// Linear-SVM distribution shift test between two encoding sets
    Distshift(commands::distshift::DistShiftArgs),
    /// Merge score tables; Pareto front, plot and group t-tests
    Report(commands::report::ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ceiling => "ceiling",
            Command::Fit(_) => "fit",
            Command::Score(_) => "score",
            Command::Pareto(_) => "pareto",
            Command::HarmonizeEval(_) => "harmonize-eval",
            Command::Craft(_) => "craft",
            Command::Distshift(_) => "distshift",
            Command::Report(_) => "report",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let file = cli
        .config
        .as_deref()
        .map(ConfigArgs::from_toml_file)
        .transpose()?;
    let cfg = RunConfig::resolve(file, cli.settings)?;
    eprintln!("effective config: {}", serde_json::to_string(&cfg)?);
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", cfg.out.display()))?;
    let name = cli.command.name();
    let extra = match &cli.command {
        Command::Synth(a) => commands::synth::run(&cfg, a)?,
        Command::Ceiling => commands::score::run_ceiling(&cfg)?,
        Command::Fit(a) => commands::score::run_fit(&cfg, a, false)?,
        Command::Score(a) => commands::score::run_fit(&cfg, a, true)?,
        Command::Pareto(a) => commands::report::run_pareto(&cfg, a)?,
        Command::HarmonizeEval(a) => commands::harmonize::run(&cfg, a)?,
        Command::Craft(a) => commands::craft::run(&cfg, a)?,
        Command::Distshift(a) => commands::distshift::run(&cfg, a)?,
        Command::Report(a) => commands::report::run_report(&cfg, a)?,
    };
    commands::write_run_meta(&cfg, name, cli.config.as_deref(), extra)
}
