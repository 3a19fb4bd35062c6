//! Command-line front end: training runs, the batch-size ablation, bound
//! verification and dataset preparation.

pub mod commands;
pub mod config;
pub mod scenario;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{RunSpec, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_OK, EXIT_VERIFY_FAILED};

#[derive(Parser, Debug)]
#[command(name = "klda", version, about = "KL-guided domain adaptation runs and bound verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one configuration for each seed.
    Train(CommonArgs),
    /// Train across batch sizes and tabulate target accuracy.
    AblateBatch(CommonArgs),
    /// Run the discrete verification sweep.
    Verify(CommonArgs),
    /// Write rotated-blobs domains as CSV.
    GenData(CommonArgs),
    /// Download and checksum the MNIST IDX archives.
    FetchMnist(CommonArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML file with flat key = value settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seed: Vec<u64>,
    /// Override a setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Rotation angles in degrees, comma separated.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub angles: Vec<f64>,
    /// Batch sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Vec<usize>,
}

impl CommonArgs {
    fn spec(&self, default_out: &str) -> RunSpec {
        RunSpec {
            config: self.config.clone(),
            out: self.out.clone().unwrap_or_else(|| PathBuf::from(default_out)),
            seeds: self.seed.clone(),
            overrides: self.set.clone(),
            angles: self.angles.clone(),
            batch_sizes: self.batch_sizes.clone(),
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match &cli.command {
        Command::Train(a) => commands::cmd_train(&a.spec("runs/train")),
        Command::AblateBatch(a) => commands::cmd_ablate_batch(&a.spec("runs/ablate-batch")),
        Command::Verify(a) => commands::cmd_verify(&a.spec("runs/verify")),
        Command::GenData(a) => commands::cmd_gen_data(&a.spec("runs/data")),
        // empty means the dataset cache directory
        Command::FetchMnist(a) => commands::cmd_fetch_mnist(&a.spec("")),
    }
}
