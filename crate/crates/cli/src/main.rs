//! `clar` command-line driver.
//!
//! Every subcommand writes its outputs plus a `manifest.json` into
//! `--output-dir`. Exit status is 0 on success, 2 on usage errors, and a
//! per-category code otherwise (see [`exit_code`]).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clar::ErrorCategory;

#[derive(Debug, Parser)]
#[command(name = "clar", version, about = "Cross-lingual argument label matching and regularized tagging")]
pub struct Cli {
    /// Overrides the seed of config-driven subcommands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Count argument labels in a CoNLL file.
    Freq {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        language: String,
        #[arg(long, default_value = "freq.tsv")]
        output: String,
    },
    /// Pair source and target labels by weight distance.
    Match {
        #[arg(long)]
        source_weights: PathBuf,
        #[arg(long)]
        target_weights: PathBuf,
        #[arg(long)]
        source_freq: PathBuf,
        #[arg(long)]
        target_freq: PathBuf,
        #[arg(long, default_value_t = clar::label_space::DEFAULT_FREQUENCY_THRESHOLD)]
        threshold: f64,
        /// `all`, `half` or a positive count; defaults by capacity.
        #[arg(long)]
        cardinality: Option<clar::matcher::Cardinality>,
        #[arg(long, default_value_t = 1)]
        capacity: usize,
        #[arg(long, default_value = "pairing.tsv")]
        output: String,
    },
    /// Train a tagger from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic two-language task from a config file.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a saved model on a CoNLL file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        language: String,
        /// Pairing used by `--combine-mapped`.
        #[arg(long)]
        pairing: Option<PathBuf>,
        /// Merge target labels that share a source partner before scoring.
        #[arg(long, requires = "pairing")]
        combine_mapped: bool,
    },
    /// Projection and distance-structure diagnostics over paired head rows.
    Analyze {
        #[arg(long)]
        source_weights: PathBuf,
        #[arg(long)]
        target_weights: PathBuf,
        #[arg(long)]
        pairing: PathBuf,
        #[arg(long, default_value_t = 2)]
        components: usize,
        /// Map target rows through this transform before comparing.
        #[arg(long)]
        transform: Option<PathBuf>,
    },
}

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Format => 3,
        ErrorCategory::Infeasible => 4,
        ErrorCategory::Numeric => 5,
        ErrorCategory::Io => 6,
    }
}

fn category_of(err: &anyhow::Error) -> ErrorCategory {
    err.chain()
        .find_map(|e| e.downcast_ref::<clar::ClarError>().map(clar::ClarError::category))
        .unwrap_or(ErrorCategory::Io)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let category = category_of(&err);
            eprintln!("error ({category}): {err:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
