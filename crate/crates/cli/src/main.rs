//! `bweda`: simulate, train, run and score blockwise streaming diarization.

mod commands;
mod error;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{bench, gradcheck, infer, score, simulate, train, viz};

#[derive(Parser)]
#[command(name = "bweda", version, about = "Blockwise streaming speaker diarization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic conversations: features, labels and reference RTTM.
    Simulate(simulate::Args),
    /// Train a model on simulated conversations.
    Train(train::Args),
    /// Diarize WAV files or feature dumps.
    Infer(infer::Args),
    /// Score hypothesis RTTM against reference RTTM.
    Score(score::Args),
    /// Time streaming inference over a sweep of stream lengths.
    Bench(bench::Args),
    /// Draw an ASCII speaker-turn chart from RTTM.
    Viz(viz::Args),
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck(gradcheck::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Train(a) => train::run(a),
        Command::Infer(a) => infer::run(a),
        Command::Score(a) => score::run(a),
        Command::Bench(a) => bench::run(a),
        Command::Viz(a) => viz::run(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, error::Failure::Usage(_)) {
                eprintln!("\nFor more information, try '--help'.");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
