//! Command-line front end for the speech-translation workbench.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{ExperimentConfig, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad or missing configuration.
    Config,
    /// Missing, malformed or inconsistent data.
    Data,
    /// Non-finite values during training.
    Numeric,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: msg.into(),
        }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Data,
            message: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.kind {
            ErrorKind::Config => "config error",
            ErrorKind::Data => "data error",
            ErrorKind::Numeric => "numerical error",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

impl std::error::Error for CliError {}

impl From<stwb_core::Error> for CliError {
    fn from(e: stwb_core::Error) -> Self {
        use stwb_core::Error as E;
        let kind = match &e {
            E::NonFinite(_) => ErrorKind::Numeric,
            E::InvalidArgument(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stwb", version, about = "Desk-scale speech translation workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Dotted-key override, e.g. `train.schedule.epochs=5`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the corpus and text/feature artifacts.
    Prepare(Common),
    /// Train (or pretrain) a model on prepared data.
    Train(Common),
    /// Decode a split with a trained model and score it.
    Decode(Common),
    /// ASR followed by MT.
    Cascade(Common),
    /// Fine-tune ST on top of a truncated pretrained encoder for several depths.
    SweepLayers(Common),
    /// Average checkpoints.
    Average(Common),
    /// Score a hypothesis file against references.
    Eval(Common),
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("stwb: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    let (common, f): (Common, fn(&ExperimentConfig) -> Result<(), CliError>) = match command {
        Command::Prepare(c) => (c, commands::prepare),
        Command::Train(c) => (c, commands::train),
        Command::Decode(c) => (c, commands::decode),
        Command::Cascade(c) => (c, commands::cascade),
        Command::SweepLayers(c) => (c, commands::sweep_layers),
        Command::Average(c) => (c, commands::average),
        Command::Eval(c) => (c, commands::eval),
    };
    let cfg = ExperimentConfig::load(&common.config, &common.overrides)?;
    f(&cfg)
}
