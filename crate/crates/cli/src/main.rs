mod data;
mod eval;
mod generate;
mod gradcheck;
mod manifest;
mod settings;
mod sweep;
mod train;
mod usage;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Overlapping multitask variational graph autoencoder: generate featured
/// networks, train, evaluate and run experiment grids.
#[derive(Debug, Parser)]
#[command(name = "an2vec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample a stochastic block model with coloured node features.
    Generate(generate::GenerateArgs),
    /// Train a model and write its checkpoint and loss trace.
    Train(train::TrainArgs),
    /// Score a checkpoint on link prediction or node classification.
    Eval(eval::EvalArgs),
    /// Run an experiment grid, resumably.
    Sweep(sweep::SweepArgs),
    /// Compare analytic gradients with finite differences.
    GradCheck(gradcheck::GradCheckArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => generate::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::GradCheck(a) => gradcheck::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            usage::exit_code(&e)
        }
    }
}
