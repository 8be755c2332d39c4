//! Command-line surface: configuration, the shared pipelines and the
//! subcommands.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;

pub mod bench;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "hdconv", version, about = "Sparse convolutional networks for geometric pattern recognition")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Override a config field, e.g. `--set train.steps=100`. Applied after
    /// the file, in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate datasets and a manifest.
    Generate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Number of instances to write.
        #[arg(long, default_value_t = 1)]
        instances: usize,
        /// Also write a CSV copy of each dataset.
        #[arg(long)]
        csv: bool,
    },
    /// Train a model; writes `model.hdmd`, logs and the final metrics.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Train on these dataset files instead of fresh instances.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Evaluate a trained model.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        /// Dataset files; defaults to the config's held-out instances.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// RANSAC registration of reg3d scenes, raw and network-filtered.
    Register {
        #[command(flatten)]
        args: ConfigArgs,
        /// Filter correspondences with this model; without it only the
        /// raw row is reported.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Scene files; defaults to `register.scenes` generated scenes.
        #[arg(long, num_args = 1..)]
        data: Vec<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer and both networks.
    Gradcheck {
        #[command(flatten)]
        args: ConfigArgs,
        /// Random instances per layer.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Pooling scaling, kernel-map build times and matmul counts.
    Bench {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [10_000usize, 100_000, 1_000_000])]
        pool_sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        pool_dim: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Points for the kernel-map timings.
        #[arg(long, default_value_t = 20_000)]
        map_points: usize,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::DimensionMismatch { .. } | Error::InvalidKernelSize(_) => 2,
        Error::Io(_) | Error::Format(_) | Error::NonFinite { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> crate::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Generate { args, instances, csv } => commands::generate(&args, instances, csv),
        Command::Train { args, data } => commands::train(&args, &data),
        Command::Eval { args, model, data } => commands::eval(&args, &model, &data),
        Command::Register { args, model, data } => commands::register(&args, model.as_deref(), &data),
        Command::Gradcheck { args, instances } => commands::gradcheck(&args, instances),
        Command::Bench { args, pool_sizes, pool_dim, repeats, map_points } => {
            commands::bench(&args, &pool_sizes, pool_dim, repeats, map_points)
        }
    }
}
