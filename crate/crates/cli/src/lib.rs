//! Pipeline driver behind the `eigensdf` binary: dataset generation, grid
//! caching, basis fitting, encoder training, finetuning, experiments,
//! sampling, timing and evaluation.

pub mod commands;
pub mod dataset;
pub mod exit;
pub mod manifest;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "eigensdf",
    version,
    about = "Shapes as principal components of signed distance grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural mesh dataset with a train/test split.
    GenDataset(commands::GenDatasetArgs),
    /// Compute signed distance grids.
    Sdf(commands::SdfArgs),
    /// Fit an eigen basis to the training grids.
    Fit(commands::FitArgs),
    /// Train a point-cloud or view encoder onto basis codes.
    TrainEncoder(commands::TrainEncoderArgs),
    /// Refine a basis with the level-set loss.
    Finetune(commands::FinetuneArgs),
    /// Evaluate a reconstruction task over a dataset split.
    Experiment(commands::ExperimentArgs),
    /// Decode random codes into grids and meshes.
    Sample(commands::SampleArgs),
    /// Time decoding and loss gradients across k and resolution.
    Bench(commands::BenchArgs),
    /// Score one predicted grid against a mesh.
    Eval(commands::EvalArgs),
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    use Command::*;
    match &cli.command {
        GenDataset(a) => commands::gen_dataset(a),
        Sdf(a) => commands::sdf(a),
        Fit(a) => commands::fit(a),
        TrainEncoder(a) => commands::train_encoder(a),
        Finetune(a) => commands::finetune_cmd(a),
        Experiment(a) => commands::experiment(a),
        Sample(a) => commands::sample(a),
        Bench(a) => commands::bench(a),
        Eval(a) => commands::eval(a),
    }
}
