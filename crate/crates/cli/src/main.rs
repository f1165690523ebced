use std::path::PathBuf;
use std::process::ExitCode;

use adafusion::config::RunConfig;
use adafusion::pipeline;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adafusion", version, about = "Visual-LiDAR place recognition with adaptive fusion")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the frame index and pair files from the raw dataset.
    Prepare,
    /// Train a model on the prepared index.
    Train,
    /// Embed frames into a descriptor database.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequences to embed; defaults to the test split.
        #[arg(long, value_delimiter = ',')]
        sequences: Vec<String>,
    },
    /// Recall@N over every pair of sequences in a database.
    Eval {
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Relative modality-weight report for a database.
    WeightsReport {
        #[arg(long)]
        db: Option<PathBuf>,
    },
    /// Write the synthetic dataset to `dataset.root`.
    Synth,
}

fn run(cli: Cli) -> adafusion::Result<()> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    println!("config hash {}", config.hash());
    match cli.command {
        Command::Prepare => {
            let r = pipeline::prepare(&config)?;
            println!(
                "sequences {}  frames train/val/test {}/{}/{}  pairs positive {} negative {}",
                r.sequences, r.train_frames, r.val_frames, r.test_frames, r.positives, r.negatives
            );
            println!("wrote {} and {}", r.index_path.display(), r.pairs_path.display());
        }
        Command::Train => {
            let (path, outcome) = pipeline::run_train(&config)?;
            if let Some(row) = outcome.log.last() {
                println!("step {} loss {:.4} lr {:.2e}", row.step, row.loss, row.lr);
            }
            println!("best checkpoint at step {} -> {}", outcome.best.step, path.display());
        }
        Command::Embed { checkpoint, sequences } => {
            let (path, db) = pipeline::run_embed(&config, checkpoint.as_deref(), &sequences)?;
            println!("{} descriptors of dim {} -> {}", db.len(), db.dim(), path.display());
        }
        Command::Eval { db } => {
            let summary = pipeline::run_eval(&config, db.as_deref())?;
            print!("{}", summary.summary_text());
        }
        Command::WeightsReport { db } => {
            let (csv, svg) = pipeline::run_weights_report(&config, db.as_deref())?;
            println!("wrote {} and {}", csv.display(), svg.display());
        }
        Command::Synth => {
            let n = pipeline::run_synth(&config)?;
            println!("{n} frames -> {}", config.dataset.root.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
