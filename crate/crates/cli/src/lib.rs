//! Command implementations behind the `xattn` binary.

pub mod cache;
pub mod commands;
pub mod error;
pub mod manifest;

use clap::{Parser, Subcommand};

use commands::{config, correspond, evaluate, reconstruct, samples, transfer};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "xattn", version, about = "Zero-shot appearance transfer with cross-image attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transfer the appearance of one image onto the structure of another.
    Transfer(transfer::TransferArgs),
    /// Invert an image and replay it without edits.
    Reconstruct(reconstruct::ReconstructArgs),
    /// Render the semantic correspondences read off cross-image attention.
    Correspond(correspond::CorrespondArgs),
    /// Score outputs with mask IoU and Gram-matrix distance.
    Evaluate(evaluate::EvaluateArgs),
    /// Print the default config, or validate a config file.
    Config(config::ConfigArgs),
    /// Write the bundled 8×8 sample images and masks.
    Samples(samples::SamplesArgs),
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::Transfer(a) => transfer::run(a),
        Command::Reconstruct(a) => reconstruct::run(a),
        Command::Correspond(a) => correspond::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Config(a) => config::run(a),
        Command::Samples(a) => samples::run(a),
    }
}
