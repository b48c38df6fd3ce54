//! `dseg` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dseg::cli::{self, CliError, EvalArgs, PredictArgs, TileArgs, TrainArgs};
use dseg::data::Split;

#[derive(Parser)]
#[command(name = "dseg", about = "Deep-dimple segmentation of SEM fractographs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut image/mask pairs into 128x128 tiles with a 70/20/10 split
    Tile {
        /// Directory of grayscale source images (<id>.png)
        #[arg(long)]
        images: PathBuf,
        /// Directory of binary {0,255} masks (<id>.png)
        #[arg(long)]
        masks: PathBuf,
        /// Output directory for tiles and the split manifest
        #[arg(long)]
        out: PathBuf,
        /// Tile side length in pixels
        #[arg(long, default_value_t = 128)]
        tile: usize,
        /// Split-assignment seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint plus a CSV log
    Train {
        /// key=value config file; flags override file values
        #[arg(long)]
        config: Option<PathBuf>,
        /// Architecture: proposed | unet
        #[arg(long)]
        arch: Option<String>,
        /// Tile directory produced by `dseg tile`
        #[arg(long)]
        tiles: Option<PathBuf>,
        /// Train on N generated synthetic pairs instead of tiles
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        base_width: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// CSV log output path
        #[arg(long)]
        log: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a tile directory
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tiles: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        /// Optional per-tile CSV output path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Predict a full-size mask for one image via tile/stitch
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        tile: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Tile { images, masks, out, tile, seed } => {
            let seed = seed.or_else(cli::env_seed).unwrap_or(0);
            cli::cmd_tile(&TileArgs { images, masks, out, tile, seed })
        }
        Command::Train { config, arch, tiles, synthetic, epochs, base_width, seed, out, log } => {
            cli::cmd_train(&TrainArgs {
                config,
                arch,
                tiles,
                synthetic,
                epochs,
                base_width,
                seed,
                out,
                log,
            })
            .map(|_| ())
        }
        Command::Eval { ckpt, tiles, split, out, threshold } => {
            let split = Split::parse(&split)
                .ok_or_else(|| CliError::Usage(format!("unknown split {split:?}")))?;
            cli::cmd_eval(&EvalArgs { ckpt, tiles, split, out, threshold }).map(|_| ())
        }
        Command::Predict { ckpt, image, out, tile, threshold } => {
            cli::cmd_predict(&PredictArgs { ckpt, image, out, tile, threshold })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
