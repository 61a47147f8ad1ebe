//! Subcommands. Each reads a TOML config (optional), applies `--set`
//! overrides, runs, and writes its resolved config next to its outputs.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::CliError;

pub mod exact;
pub mod solve;
pub mod tournament;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "afn", version, about = "Adversarial flow networks: training, exact flows, solving and play")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.batch_size=256`. Repeatable;
    /// later values win and all of them beat the file.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Output directory; same as `--set out_dir=DIR`.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
}

impl Common {
    /// Overrides with `--out` folded in last.
    pub fn overrides(&self) -> Vec<String> {
        let mut v = self.set.clone();
        if let Some(o) = &self.out {
            v.push(format!("out_dir={:?}", o.display().to_string()));
        }
        v
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.json and metrics.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Compute exact flows and export them as JSON lines.
    Exact {
        #[command(flatten)]
        common: Common,
    },
    /// Check the exact flows against the balance conditions; exits 3 when
    /// a residual exceeds its tolerance.
    Verify {
        #[command(flatten)]
        common: Common,
    },
    /// Solve positions given as move strings.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Positions as move strings, one base-36 digit per move.
        positions: Vec<String>,
        /// File with one move string per line.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Round-robin tournament with an Elo fit.
    Tournament {
        #[command(flatten)]
        common: Common,
    },
    /// Solver-scored move quality over a random position corpus.
    Quality {
        #[command(flatten)]
        common: Common,
    },
    /// Run the HTTP play service.
    Serve {
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, resume } => train::run(&common, resume).map(|s| emit(&s)),
        Command::Exact { common } => exact::run_exact(&common).map(|s| emit(&s)),
        Command::Verify { common } => {
            let report = exact::run_verify(&common)?;
            emit(&report);
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
                Err(CliError::new("check_failed", format!("over tolerance: {}", failed.join(", "))))
            }
        }
        Command::Solve { common, positions, corpus } => {
            let mut out = std::io::stdout().lock();
            solve::run(&common, &positions, corpus.as_deref(), &mut out)
        }
        Command::Tournament { common } => tournament::run_tournament(&common).map(|s| emit(&s)),
        Command::Quality { common } => tournament::run_quality(&common).map(|s| emit(&s)),
        Command::Serve { common } => crate::serve::run(&common),
    }
}

/// Prints a summary record as one JSON line on stdout.
pub fn emit<T: Serialize>(value: &T) {
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut out, value);
    let _ = writeln!(out);
}

fn default_out(sub: &str) -> PathBuf {
    PathBuf::from("runs").join(sub)
}
