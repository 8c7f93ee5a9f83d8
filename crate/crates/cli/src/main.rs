mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Document rectification toolkit: synthetic datasets, line extraction,
/// the toy network, evaluation and the round-trip bias harness.
#[derive(Parser, Debug)]
#[command(name = "fgrect", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct Common {
    /// Master seed (overrides `seed` in the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// File of key=value overrides; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render, distort and write a synthetic dataset (resumable).
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        severity: Option<f64>,
    },
    /// Detect and filter ruling lines in an image; writes JSONL line elements.
    ExtractLines {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional PNG with the surviving segments drawn over the image.
        #[arg(long)]
        overlay: Option<PathBuf>,
    },
    /// Run the network on one 288x288 image.
    Forward {
        #[arg(long)]
        image: PathBuf,
        /// Weight bundle; seeded random weights when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Predicted backward field (DFLD).
        #[arg(long = "out-field", alias = "out")]
        out_field: PathBuf,
        #[arg(long = "out-mask")]
        out_mask: Option<PathBuf>,
        /// Last decoder layer's attention for the centre query.
        #[arg(long = "dump-attn")]
        dump_attn: Option<PathBuf>,
        /// Write the weights that were used.
        #[arg(long = "save-weights")]
        save_weights: Option<PathBuf>,
    },
    /// Score predicted fields against a dataset; writes a JSON report.
    Eval {
        #[arg(long = "pred-dir")]
        pred_dir: PathBuf,
        #[arg(long = "gt-dir")]
        gt_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forward/backward round-trip bias over sampling ratios.
    BiasReport {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated, ascending.
        #[arg(long)]
        ratios: Option<String>,
        /// CSV table.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Keep foreground colours, paint the rest white.
    Enhance {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a coarse field to a sample's target by gradient descent.
    OptimizeDemo {
        /// Dataset sample directory; a sample is synthesised from the seed
        /// when omitted.
        #[arg(long)]
        sample: Option<PathBuf>,
        /// Loss curve CSV.
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "out-field")]
        out_field: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long = "learning-rate")]
        learning_rate: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
