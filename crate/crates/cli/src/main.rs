//! `flowpriv` command-line tool.
//!
//! Exit codes: 0 success, 1 failed check (tolerance, verification,
//! divergence), 2 usage error, 3 I/O or format error.

mod cmd;
mod error;
mod util;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliResult;

#[derive(Parser)]
#[command(
    name = "flowpriv",
    version,
    about = "Private image release through a normalizing flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test splits and their manifests.
    GenData(cmd::data::GenDataArgs),
    /// Train a flow by maximum likelihood on a manifest.
    Train(cmd::train::TrainArgs),
    /// Compute per-element sensitivity and clip box from training latents.
    LatentStats(cmd::privacy::LatentStatsArgs),
    /// Write privatized copies of every image in a manifest.
    Privatize(cmd::privacy::PrivatizeArgs),
    /// Score images with the two-model log-likelihood ratio.
    Score(cmd::detect::ScoreArgs),
    /// Score and report AUC, or sweep budgets in utility mode.
    EvalAuc(cmd::detect::EvalAucArgs),
    /// Histogram audit of the privacy bound on a low-dimensional mechanism.
    VerifyLdp(cmd::check::VerifyLdpArgs),
    /// Check forward/inverse consistency of a checkpoint on a manifest.
    Roundtrip(cmd::check::RoundtripArgs),
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => cmd::data::gen_data(a),
        Command::Train(a) => cmd::train::train(a),
        Command::LatentStats(a) => cmd::privacy::latent_stats(a),
        Command::Privatize(a) => cmd::privacy::privatize(a),
        Command::Score(a) => cmd::detect::score(a),
        Command::EvalAuc(a) => cmd::detect::eval_auc(a),
        Command::VerifyLdp(a) => cmd::check::verify_ldp(a),
        Command::Roundtrip(a) => cmd::check::roundtrip(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flowpriv: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
