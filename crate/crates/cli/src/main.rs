//! Experiment front door: dataset generation, training, tuning, evaluation,
//! landscape dumps, and report assembly. Every command is reproducible from
//! (config file, seed) and echoes the resolved config into its output
//! directory.

mod commands;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use dgrasp_core::config::ExperimentConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dgrasp", version, about = "Implicit grasp policy laboratory")]
struct Cli {
    /// Experiment config file (flat key = value text); defaults apply when
    /// omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Caps the worker thread count (0 = automatic).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate oracle grasp demonstrations into a line-delimited dataset.
    DemoGen,
    /// Train a grasp value model on a demonstration dataset.
    Train {
        /// Dataset produced by demo-gen.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Tune the pose-optimization schedule for trained weights.
    Tune {
        #[arg(long)]
        weights: PathBuf,
    },
    /// Evaluate trained weights on the configured task.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        /// Policy name written into the report.
        #[arg(long, default_value = "policy")]
        name: String,
    },
    /// Dump the value and its gradient on a 2D slice as a grid CSV.
    Landscape {
        #[arg(long)]
        weights: PathBuf,
        /// Scene selector: episode seed for the configured task.
        #[arg(long, default_value_t = 0)]
        scene_seed: u64,
        /// Slice height (meters).
        #[arg(long, default_value_t = 0.1)]
        z: f64,
        /// Grid resolution per axis.
        #[arg(long, default_value_t = 50)]
        grid: usize,
        /// Closing-axis yaw of the fixed downward orientation (radians).
        #[arg(long, default_value_t = 0.0)]
        yaw: f64,
    },
    /// Merge evaluation reports into a policy × task summary.
    Report {
        /// Evaluation report CSV files.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let threads = cli.threads.unwrap_or(config.threads);
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .context("configuring worker threads")?;
    }

    match cli.command {
        Command::DemoGen => commands::demo_gen(&config, &cli.out, cli.force),
        Command::Train { dataset } => commands::train(&config, &dataset, &cli.out, cli.force),
        Command::Tune { weights } => commands::tune(&config, &weights, &cli.out, cli.force),
        Command::Eval { weights, name } => {
            commands::eval(&config, &weights, &name, &cli.out, cli.force)
        }
        Command::Landscape { weights, scene_seed, z, grid, yaw } => {
            commands::landscape(&config, &weights, scene_seed, z, grid, yaw, &cli.out, cli.force)
        }
        Command::Report { inputs } => commands::report(&inputs, &cli.out, cli.force),
    }
}
