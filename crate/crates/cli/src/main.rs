//! `eigendistort` command-line tool.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "eigendistort", version, about = "Eigen-distortions of perceptual image models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extremal Fisher eigen-distortions of one image
    Synth(SynthArgs),
    /// Render distortions onto an image (single or gallery)
    Render(RenderArgs),
    /// Fit model parameters to a rated manifest
    Train(TrainArgs),
    /// Pearson correlation of model distances with manifest scores
    Eval(EvalArgs),
    /// Simulated threshold experiment and the D statistic
    Simulate(SimulateArgs),
    /// Dense finite-difference eigendecomposition (small images)
    Oracle(OracleArgs),
    /// Write a synthetic rated dataset and its manifest
    Dataset(DatasetArgs),
}

/// Rayon worker count from `EIGENDISTORT_THREADS`, default 1.
fn init_threads() {
    let n = std::env::var("EIGENDISTORT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1);
    // a pool may already exist when embedded; keep it
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error:usage: {first}");
            return ExitCode::from(EXIT_INPUT);
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Render(a) => render(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Oracle(a) => oracle(&a),
        Command::Dataset(a) => dataset(&a),
    };
    match result {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged(msg)) => {
            eprintln!("error:convergence: {msg}");
            ExitCode::from(EXIT_CONVERGENCE)
        }
        Err(e) => {
            eprintln!("error:{}: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
