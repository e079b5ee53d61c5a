//! `resattunet <command> --config <path> [--set key=value ...] [--out <dir>]`
//!
//! Prints one JSON result line on stdout. Failures print one JSON error line
//! on stderr and exit with 2 for usage errors or 1 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "resattunet", version, about = "Residual attention UNet for multispectral patch segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value by dotted path, e.g. `train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Output directory; takes precedence over `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth,
    /// Derive class weights from per-class pixel counts.
    Weights,
    /// Train, logging per epoch and checkpointing.
    Train,
    /// Score a checkpoint on a manifest split.
    Evaluate,
    /// Write the predicted label raster of one image.
    Predict,
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Debug)]
pub struct CliError {
    pub usage: bool,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            usage: true,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError {
            usage: false,
            message: message.into(),
        }
    }
}

impl From<resattunet::Error> for CliError {
    fn from(e: resattunet::Error) -> Self {
        use resattunet::Error as E;
        let usage = match &e {
            E::Config(_) | E::InvalidArgument(_) | E::Empty(_) => true,
            E::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        CliError {
            usage,
            message: e.to_string(),
        }
    }
}

fn report(err: &CliError) -> ExitCode {
    let kind = if err.usage { "usage" } else { "runtime" };
    eprintln!("{}", serde_json::json!({ "error": kind, "message": err.message }));
    ExitCode::from(if err.usage { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&CliError::usage(e.to_string().trim_end())),
    };
    let seed = std::env::var("SEED").ok();
    let result = RunConfig::resolve(cli.config.as_deref(), &cli.sets, cli.out.as_deref(), seed.as_deref())
        .and_then(|cfg| {
            cfg.echo()?;
            match cli.command {
                Command::Synth => commands::synth(&cfg),
                Command::Weights => commands::weights(&cfg),
                Command::Train => commands::train(&cfg),
                Command::Evaluate => commands::evaluate(&cfg),
                Command::Predict => commands::predict(&cfg),
                Command::Gradcheck => commands::gradcheck(&cfg),
            }
        });
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => report(&e),
    }
}
