//! `maskseg`: dataset generation, two-phase training, inference, evaluation,
//! gradient checking, and ablation sweeps for the mask-based anomaly
//! segmentation toolkit. All outputs are static files (MTEN tensors, JSON
//! manifests, CSV tables, PGM heatmaps).

mod commands;
mod config;
mod manifest;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "maskseg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic road-scene dataset
    Datagen(commands::datagen::Args),
    /// Phase-1 closed-set segmentation training
    Train(commands::train::TrainArgs),
    /// Phase-2 contrastive fine-tuning with cut-paste outliers
    Finetune(commands::train::FinetuneArgs),
    /// Run inference and write per-image anomaly score maps
    Infer(commands::infer::Args),
    /// Evaluate score maps at the pixel or component level
    Eval(commands::eval::Args),
    /// Finite-difference gradient verification of every loss and layer
    Gradcheck(commands::gradcheck::Args),
    /// Train/evaluate ablation grids and emit CSV tables
    Ablate(commands::ablate::Args),
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Datagen(args) => commands::datagen::run(args),
        Command::Train(args) => commands::train::run_train(args),
        Command::Finetune(args) => commands::train::run_finetune(args),
        Command::Infer(args) => commands::infer::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::Ablate(args) => commands::ablate::run(args),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}
