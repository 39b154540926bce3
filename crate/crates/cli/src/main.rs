//! `mbse3`: generate scenes, train, evaluate, and run the property suite.
//!
//! Exit codes: 0 ok, 1 property failure, 2 configuration, 3 I/O,
//! 4 numerical failure, 5 checkpoint/config mismatch.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Properties(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Properties(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Mismatch(_) => 5,
        }
    }
}

impl From<mbse3_core::Error> for CliError {
    fn from(e: mbse3_core::Error) -> Self {
        use mbse3_core::diffcore::DiffError;
        use mbse3_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Generation(_) | E::Geom(_) => CliError::Config(msg),
            E::Io { .. } | E::SceneFormat { .. } | E::MissingFlow(_) => CliError::Io(msg),
            E::NonFiniteActivation { .. } | E::NonFiniteLoss { .. } => CliError::Numeric(msg),
            E::Shape(_) => CliError::Mismatch(msg),
            E::Diff(d) => match d {
                DiffError::NonFiniteGradient(_) | DiffError::NonFiniteParam(_) => CliError::Numeric(msg),
                DiffError::Io(_) | DiffError::Checkpoint(_) => CliError::Io(msg),
                _ => CliError::Mismatch(msg),
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mbse3", version, about = "Equivariant multi-body rigid segmentation and motion estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults are used for anything omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set trainer.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train/val/test scene files.
    Gen(#[command(flatten)] Common),
    /// Train on the generated train split.
    Train(#[command(flatten)] Common),
    /// Evaluate the checkpoint on the test split.
    Eval(#[command(flatten)] Common),
    /// Run the property suite.
    Check(#[command(flatten)] Common),
}

fn configure_threads() {
    if let Some(n) = std::env::var("MBSE3_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            // a second initialization can only fail if a pool already exists
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    configure_threads();
    let (common, run): (&Common, fn(&RunConfig, bool) -> Result<(), CliError>) = match &cli.command {
        Command::Gen(c) => (c, commands::gen),
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Check(c) => (c, commands::check),
    };
    let result = RunConfig::load(common.config.as_deref(), &common.sets).and_then(|cfg| run(&cfg, common.quiet));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mbse3: {e}");
            ExitCode::from(e.code())
        }
    }
}
