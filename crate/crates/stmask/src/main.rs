use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use stmask::commands::{self, RunConfig};
use stmask_core::datagen::{GenConfig, Split};

/// Video instance segmentation with masked-attention object queries.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Seed for every random choice (data generation, initialization, sampling).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of moving shapes.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        clips: usize,
        /// Frames per clip.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Two discs crossing paths in every clip.
        #[arg(long)]
        crossing: bool,
    },
    /// Train a model on the train split and write a checkpoint directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON file with `model` and `train` sections; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Predict instances for a dataset split or a single clip file.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "clip", required_unless_present = "clip")]
        data: Option<PathBuf>,
        /// A `[T,H,W,3]` tensor file.
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction files against the dataset ground truth.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        limit: Option<usize>,
        /// Directory for eval.json and eval.txt; defaults to the predictions directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render predicted masks over the frames of a clip as PNG files.
    Overlay {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        min_score: f64,
        #[arg(long, default_value_t = 4)]
        scale: u32,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { out, clips, frames, crossing } => {
            let gen = GenConfig { frames, crossing, ..GenConfig::default() };
            commands::gen_data(&out, &gen, clips, cli.seed)?;
        }
        Command::Train { data, out, config, iters, batch_size, lr } => {
            let mut cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => RunConfig::default(),
            };
            cfg.train.seed = cli.seed;
            if let Some(v) = iters {
                cfg.train.total_iters = v;
            }
            if let Some(v) = batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = lr {
                cfg.train.base_lr = v;
            }
            let curve = commands::train_run(&data, &out, &cfg)?;
            if let (Some(first), Some(last)) = (curve.first(), curve.last()) {
                println!("loss {first:.4} -> {last:.4}; checkpoint in {}", out.display());
            }
        }
        Command::Infer { checkpoint, data, clip, split, limit, out } => match (data, clip) {
            (Some(data), _) => {
                let n = commands::infer_split(&checkpoint, &data, split.into(), limit, &out)?;
                println!("predicted {n} clips into {}", out.display());
            }
            (None, Some(clip)) => {
                let path = commands::infer_file(&checkpoint, &clip, &out)?;
                println!("wrote {}", path.display());
            }
            (None, None) => unreachable!("clap requires --data or --clip"),
        },
        Command::Eval { data, predictions, split, limit, out } => {
            let out = out.unwrap_or_else(|| predictions.clone());
            let report = commands::eval_run(&data, split.into(), limit, &predictions, &out)?;
            print!("{}", report.to_text());
        }
        Command::Overlay { clip, predictions, out, min_score, scale } => {
            let paths = commands::overlay(&clip, &predictions, min_score, scale, &out)?;
            println!("wrote {} images to {}", paths.len(), out.display());
        }
    }
    Ok(())
}
