//! Command-line front end for `sloth-core`.
//!
//! Exit codes: 0 success, 1 usage error, 2 invalid input or a failed
//! computation, 3 a numerical check that did not pass.

pub mod ablate;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use ablate::{AblationAxis, AblationRow};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

impl From<sloth_core::Error> for CliError {
    fn from(e: sloth_core::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "sloth",
    version,
    about = "Compressed visual tokens for a tiny multimodal decoder"
)]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for parameters, synthetic images and datasets.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compress a synthetic image, prefill and decode one answer.
    Demo {
        /// Four tiles plus a thumbnail.
        #[arg(long)]
        hd: bool,
    },
    /// Train every variant on one ablation axis and write a CSV.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Token, FLOP and memory table for the built-in architectures.
    Cost {
        /// `.json` selects JSON, anything else CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare end-to-end gradients with central differences.
    Gradcheck,
    /// Run both training stages and write the loss curves.
    Train {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command, writing the
/// report to `out`. Returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{e}");
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    match &cli.command {
        Command::Demo { hd } => commands::demo(&config, *hd, out),
        Command::Ablate { axis, out: path } => {
            let axis: AblationAxis = axis.parse()?;
            let rows = ablate::run_axis(&config, axis)?;
            let csv = ablate::to_csv(&rows);
            write_or_print(path.as_ref(), &csv, out)
        }
        Command::Cost { out: path } => {
            let json = path
                .as_ref()
                .is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
            let text = commands::cost_table(&config, json)?;
            write_or_print(path.as_ref(), &text, out)
        }
        Command::Gradcheck => commands::gradcheck(&config, out),
        Command::Train { out: dir } => commands::train(&config, dir.as_deref(), out),
    }
}

fn write_or_print(path: Option<&PathBuf>, text: &str, out: &mut dyn Write) -> Result<(), CliError> {
    match path {
        Some(p) => {
            std::fs::write(p, text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            writeln!(out, "wrote {}", p.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}
