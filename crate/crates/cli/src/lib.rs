//! The `logitshift` command: train the reference CNN, attack it, explain
//! its predictions and check that the attack is invisible at the output.
//!
//! Exit codes: 0 success, 1 a verification criterion failed, 2 usage or
//! input error.

pub mod commands;
pub mod io;
pub mod render;
pub mod report;

use clap::{Parser, Subcommand};

use commands::{attack, dataset, demo, explain, train, verify};

#[derive(Debug, Parser)]
#[command(name = "logitshift", version, about = "Logit-shift attribution experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the reference CNN on synthetic blob images.
    Train(train::TrainArgs),
    /// Add the logit-shift branch to a trained model.
    Attack(attack::AttackArgs),
    /// Compute a saliency, Grad-CAM or integrated-gradients map for one image.
    Explain(explain::ExplainArgs),
    /// Compare two models on probe images and write a JSON report.
    Verify(verify::VerifyArgs),
    /// Train, attack, verify and render comparison panels in one go.
    Demo(demo::DemoArgs),
    /// Export synthetic blob images as PGM files with a label manifest.
    Dataset(dataset::DatasetArgs),
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Status {
    Passed,
    /// Names of the failed criteria.
    Failed(Vec<String>),
}

impl Status {
    pub fn exit_code(&self) -> u8 {
        match self {
            Status::Passed => 0,
            Status::Failed(_) => 1,
        }
    }
}

pub fn run(cli: &Cli) -> anyhow::Result<Status> {
    match &cli.command {
        Command::Train(a) => train::run(a),
        Command::Attack(a) => attack::run(a),
        Command::Explain(a) => explain::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Demo(a) => demo::run(a),
        Command::Dataset(a) => dataset::run(a),
    }
}

/// Print a progress line; a closed stdout is not an error.
pub(crate) fn say(line: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}
