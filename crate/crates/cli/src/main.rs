//! `stdnet` command-line interface: train, evaluate, decompose, run
//! ablation studies and materialize synthetic datasets.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use stdnet_core::data::synth;
use stdnet_core::metrics::Aggregation;
use stdnet_core::pipeline::{self, config, EvalOptions};

#[derive(Parser)]
#[command(
    name = "stdnet",
    about = "Structure-texture demixing segmentation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    global: GlobalFlags,
}

#[derive(Args, Clone)]
struct GlobalFlags {
    /// Override the run seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Disable nondeterministic kernels. Every kernel in this build is
    /// already deterministic, so this only records the request.
    #[arg(long, global = true)]
    strict_determinism: bool,

    /// Compute device; only `cpu` is available.
    #[arg(long, global = true, default_value = "cpu")]
    device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset and write metrics.json/csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root (vessel or disc/cup layout, matching the checkpoint).
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Vessel loader resize target.
        #[arg(long, default_value_t = 512)]
        image_size: usize,
        /// Disc crop margin (pixels) and crop output size.
        #[arg(long, default_value_t = 50)]
        crop_margin: usize,
        #[arg(long, default_value_t = 256)]
        crop_size: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// per_image or pooled.
        #[arg(long, default_value = "per_image")]
        aggregation: String,
        /// Output directory for metrics.json / metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render S/T/E green-channel decompositions of one image.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "decomposition")]
        out: PathBuf,
    },
    /// Train and evaluate every configured variant across seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Materialize a synthetic dataset to disk.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_global(cfg: &mut pipeline::TrainConfig, g: &GlobalFlags) {
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        if let Some(s) = cfg.synth.as_mut() {
            s.seed = seed;
        }
    }
    cfg.strict_determinism = g.strict_determinism;
    cfg.device = g.device.clone();
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config: path } => {
            let mut cfg = config::train_config_from_file(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            apply_global(&mut cfg, &cli.global);
            cfg.validate()?;
            let out = pipeline::train(&cfg)?;
            println!(
                "trained {} steps; checkpoint {}; log {}",
                out.steps,
                out.checkpoint.display(),
                out.log.display()
            );
            if let Some(iou) = out.train_iou {
                println!("final training IOU {iou:.4}");
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            image_size,
            crop_margin,
            crop_size,
            threshold,
            aggregation,
            out,
        } => {
            if cli.global.device != "cpu" {
                anyhow::bail!("device {:?} unavailable: this build is CPU-only", cli.global.device);
            }
            let split = match split.as_str() {
                "test" => synth::Split::Test,
                "training" | "train" => synth::Split::Train,
                other => anyhow::bail!("unknown split {other:?} (expected training|test)"),
            };
            let opts = EvalOptions {
                threshold,
                aggregation: aggregation.parse::<Aggregation>()?,
                split,
            };
            let report = pipeline::evaluate(
                &checkpoint,
                &data,
                image_size,
                crop_margin,
                crop_size,
                &opts,
                out.as_deref(),
            )?;
            print!("{}", report.to_csv());
            if let Some(dir) = out {
                println!("wrote {}", dir.join("metrics.json").display());
            }
        }
        Command::Decompose {
            checkpoint,
            image,
            out,
        } => {
            let written = pipeline::decompose(&checkpoint, &image, &out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate { config: path } => {
            let (mut base, variants, seeds) = config::ablate_config_from_file(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            apply_global(&mut base, &cli.global);
            // The per-run seeds come from the `seeds` list; the global seed
            // only steers dataset generation here.
            let table = pipeline::ablate(&base, &variants, &seeds)?;
            print!("{}", table.to_csv());
            println!("wrote {}", base.out_dir.join("ablation.csv").display());
        }
        Command::Synth { config: path, out } => {
            let cfg = config::synth_config_from_file(&path)
                .with_context(|| format!("loading {}", path.display()))?;
            synth::materialize(&cfg, &out)?;
            println!(
                "materialized {} training and {} test samples under {}",
                cfg.n_train,
                cfg.n_test,
                out.display()
            );
        }
    }
    Ok(())
}
