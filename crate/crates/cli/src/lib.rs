//! Command-line orchestration of the reactpref toolkit.
//!
//! Every command reads one [`config::RunConfig`], writes its outputs into
//! `<out>/<command>/` together with a config echo and a manifest of sha256
//! hashes, and is byte-for-byte reproducible for a fixed seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod output;

use config::RunConfig;

/// Invalid or inconsistent configuration; the process exits with code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "reactpref", version, about = "Preference-trained reaction generation on planted worlds")]
pub struct Cli {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.trainer.margin=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output root; falls back to the `out` key, then REACTPREF_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted world and write its dataset.
    Synth,
    /// Train the sequence model with the preference objective.
    Train,
    /// Train the judge network.
    TrainJudge,
    /// Evaluate a trained model under each requested mode.
    Eval,
    /// Train and evaluate over the (m, λ_rank, λ_gn) grid.
    Sweep,
    /// Print the reports or sweep table of a directory as markdown.
    Report {
        dir: PathBuf,
        /// Also write the table to this file.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Runs one command and returns what it has to say on stdout: the table for
/// `report`, a one-line summary otherwise.
pub fn run(cli: &Cli) -> anyhow::Result<String> {
    if let Command::Report { dir, output } = &cli.command {
        let table = commands::report(dir)?;
        if let Some(path) = output {
            std::fs::write(path, &table)?;
        }
        return Ok(table);
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    let root = cfg.out_root(cli.out.as_deref());
    let manifest = match cli.command {
        Command::Synth => commands::synth(&cfg, &root)?,
        Command::Train => commands::train(&cfg, &root)?,
        Command::TrainJudge => commands::train_judge(&cfg, &root)?,
        Command::Eval => commands::eval(&cfg, &root)?,
        Command::Sweep => commands::sweep(&cfg, &root)?,
        Command::Report { .. } => unreachable!("handled above"),
    };
    Ok(format!(
        "{}: wrote {} files to {}\n",
        manifest.command,
        manifest.files.len(),
        root.join(&manifest.command).display()
    ))
}

/// Exit code for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.downcast_ref::<ConfigError>().is_some()) {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

pub fn main_with(cli: Cli) -> ExitCode {
    match run(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
