//! `agm`: train, query, sample and benchmark pairwise graphical models.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "agm",
    version,
    about = "Ensemble and single pairwise MRFs trained through belief propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Adversarial training of a potential-generating learner.
    TrainAgm(TrainArgs),
    /// Risk-minimizing training of a single potential vector.
    TrainEgm(TrainArgs),
    /// Accuracy of a checkpoint on generated queries.
    Infer(InferArgs),
    /// Samples from a checkpoint, one-shot or by Gibbs sampling.
    Sample(SampleArgs),
    /// Scores a sampler by training a fresh EGM on its samples.
    Distill(DistillArgs),
    /// Accuracy against ensemble size over shared queries.
    #[command(name = "sweep-M")]
    SweepM(SweepArgs),
    /// Times batched BP over a grid of step counts and edge counts.
    BenchBp(BenchArgs),
    /// Writes a random or grid structure file.
    MakeStructure(StructureArgs),
}

#[derive(Args)]
pub struct Output {
    /// Seed for every random choice the command makes.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// `key=value` trainer configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    /// Training curriculum (EGM only), e.g. `fractional=0.5`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    bp_steps: Option<usize>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "fractional=0.7")]
    task: String,
    /// Ensemble size M; ignored for single-model checkpoints.
    #[arg(long)]
    ensemble_size: Option<usize>,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long)]
    bp_steps: Option<usize>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// `agm-oneshot`, `gibbs` or `gibbs:burn=B`.
    #[arg(long, default_value = "agm-oneshot")]
    mode: String,
    #[arg(long)]
    bp_steps: Option<usize>,
    /// Image shape `HxW` for the sample grid; taken from the dataset when given.
    #[arg(long)]
    image_shape: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct DistillArgs {
    /// Sampler: a learner (one-shot) or potentials (Gibbs) checkpoint.
    #[arg(long, required_unless_present = "samples")]
    checkpoint: Option<PathBuf>,
    /// Use this dataset as the sample set instead of a checkpoint.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    structure: PathBuf,
    /// Test split the distilled model is scored on.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "agm-oneshot")]
    mode: String,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// EGM configuration for the distilled model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "fractional=0.5")]
    task: String,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    /// BP steps of the one-shot sampler.
    #[arg(long)]
    bp_steps: Option<usize>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    structure: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "fractional=0.7")]
    task: String,
    /// Comma-separated ensemble sizes.
    #[arg(long, default_value = "10,100,1000")]
    ensemble_size: String,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long)]
    bp_steps: Option<usize>,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 64)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    support: usize,
    /// Comma-separated BP step counts.
    #[arg(long, default_value = "4,8,16,32")]
    bp_steps: String,
    /// Comma-separated edge counts.
    #[arg(long, default_value = "128,256,512,1024")]
    edges: String,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    /// Report ratios without failing when they leave the linear band.
    #[arg(long)]
    no_check: bool,
    #[command(flatten)]
    out: Output,
}

#[derive(Args)]
pub struct StructureArgs {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, default_value_t = 2)]
    support: usize,
    /// Edges per node for random structures.
    #[arg(long, default_value_t = 5.0)]
    edge_factor: f64,
    /// Grid shape `HxW`; a random structure is made when absent.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = commands::init_threads().and_then(|()| match cli.command {
        Command::TrainAgm(a) => commands::train_agm(a),
        Command::TrainEgm(a) => commands::train_egm(a),
        Command::Infer(a) => commands::infer(a),
        Command::Sample(a) => commands::sample(a),
        Command::Distill(a) => commands::distill(a),
        Command::SweepM(a) => commands::sweep(a),
        Command::BenchBp(a) => commands::bench(a),
        Command::MakeStructure(a) => commands::make_structure(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
