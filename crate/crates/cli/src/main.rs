// SPDX-License-Identifier: MIT OR Apache-2.0

//! `reasonlens`: head inspection, memory injection sweeps, lens training.

mod commands;
mod options;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use options::{Options, Precision};

#[derive(Debug, Parser)]
#[command(name = "reasonlens", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config file; keys are flag names, flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    options: Options,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum Command {
    /// Top-k tokens of one head's output projected through the unembedding (or a trained lens).
    InspectHead,
    /// Single memory injection; prints answer probability before and after.
    Inject,
    /// Curated or fixed-memory injection over a (layer, magnitude) grid.
    Sweep,
    /// Grid sweep with a random word of one part of speech per injection.
    PosSweep,
    /// Most common words of each part of speech injected at one (layer, magnitude).
    RandomSweep,
    /// Knowledge triples to multi-hop prompt pairs.
    #[command(name = "gen-2wmh")]
    Gen2wmh,
    /// Answer probability, surprisal and prompt length per hop.
    Stats,
    /// Train per-head lenses and write one archive per head.
    TrainLens,
    /// Memory-encoding FLOP estimates.
    Flops,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InspectHead => "inspect-head",
            Self::Inject => "inject",
            Self::Sweep => "sweep",
            Self::PosSweep => "pos-sweep",
            Self::RandomSweep => "random-sweep",
            Self::Gen2wmh => "gen-2wmh",
            Self::Stats => "stats",
            Self::TrainLens => "train-lens",
            Self::Flops => "flops",
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let options = match &cli.config {
        Some(path) => Options::from_file(path)?.overlay(cli.options),
        None => cli.options,
    };
    if options.workers == Some(0) {
        anyhow::bail!("workers: must be at least 1");
    }
    if let Some(n) = options.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("workers")?;
    }
    match options.precision.unwrap_or_default() {
        Precision::F32 => commands::run::<f32>(&cli.command, &options),
        Precision::F64 => commands::run::<f64>(&cli.command, &options),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
