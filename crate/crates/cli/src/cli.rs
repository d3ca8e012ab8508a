use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "multitoken", version, about = "Multi-period token forecaster")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Seed for initialization, shuffling and dropout.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute in f64 instead of f32.
    #[arg(long, global = true)]
    pub float64: bool,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    pub quiet: bool,
    /// Worker threads for evaluation.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    /// Config file in `key = value` format.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Comma-separated periods; skips detection.
    #[arg(long)]
    pub periods: Option<String>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Report the dominant periods of a CSV file.
    Periods {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Restrict detection to one column.
        #[arg(long)]
        column: Option<String>,
        /// Ignore periods longer than this.
        #[arg(long)]
        max_period: Option<usize>,
    },
    /// Split a series into seasonal components and a trend.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        periods: String,
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        column: Option<String>,
        /// First row to decompose.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Number of rows; defaults to the rest of the file.
        #[arg(long)]
        len: Option<usize>,
        /// Horizon used for the pooled-horizon bookkeeping.
        #[arg(long, default_value_t = 96)]
        horizon: usize,
    },
    /// Train a model and write its best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint_out: PathBuf,
        /// Defaults to `<checkpoint>.history.json`.
        #[arg(long)]
        history_out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Config file supplying data options (split ratios etc.).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Forecast from the context ending at `--end` (default: last row).
    Forecast {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write values in data units instead of normalized units.
        #[arg(long)]
        denormalize: bool,
        #[arg(long)]
        end: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time training iterations over several context lengths.
    Bench {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "336,960,1680")]
        lengths: String,
        #[arg(long, default_value_t = 96)]
        horizon: usize,
        #[arg(long, default_value_t = 16)]
        rho: usize,
        /// Periods shared by every length; detected on the training split
        /// (bounded by the shortest length) when absent.
        #[arg(long)]
        periods: Option<String>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train and score every ablation setting.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        output: PathBuf,
        /// Per-row validation metrics and histories.
        #[arg(long)]
        details_out: Option<PathBuf>,
    },
}
