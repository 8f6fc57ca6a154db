//! `hfus`: generate synthetic study corpora, train and evaluate the
//! classifier variants, predict single studies, and export ROC data for
//! plotting. Every command is deterministic given its flags and seed.

mod commands;
mod config;

use anyhow::{ensure, Context, Result};
use clap::{Parser, Subcommand};
use config::{
    AugmentEcho, ConfigFile, DataEcho, ModelEcho, OutputEcho, TrainEcho, TrainSetup,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "hfus",
    about = "Multi-view liver ultrasound study classification pipeline",
    long_about = "Multi-view liver ultrasound study classification pipeline.\n\n\
        All commands are single-threaded and bit-reproducible for a fixed seed. \
        The HFUS_THREADS environment variable caps internal parallelism; the \
        current implementation runs entirely on one thread, so any cap >= 1 is \
        honored trivially (default 1).",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of ultrasound studies with liver masks.
    GenData(GenDataArgs),
    /// Train one variant on one cross-validation fold.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a fold's test split.
    Eval(EvalArgs),
    /// Predict the fibrosis probability for the study in a directory.
    Predict(PredictArgs),
    /// Collect per-fold ROC staircases into plottable CSVs.
    ExportRoc(ExportRocArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory (images/, masks/, manifest.jsonl)
    #[arg(long)]
    out: PathBuf,
    /// Number of studies (labels balanced: ceil(N/2) positive)
    #[arg(long, default_value_t = 200)]
    studies: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum images per study
    #[arg(long, default_value_t = 1)]
    min_images: usize,
    /// Maximum images per study
    #[arg(long, default_value_t = 14)]
    max_images: usize,
    /// Corner-patch confounder: off, train (label-correlated), or flipped
    #[arg(long, default_value = "off")]
    confounder: String,
    /// Image size as HxW
    #[arg(long, default_value = "64x64")]
    image_size: String,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// TOML configuration file; any flag below overrides its value
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (JSONL)
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Run directory for checkpoint.hfus, history.csv, config.toml
    #[arg(long)]
    out: Option<PathBuf>,
    /// imagewise, imagewise_roi, global_fusion, ghif, or ghif_vsp
    #[arg(long)]
    variant: Option<String>,
    /// instance or batch
    #[arg(long)]
    norm: Option<String>,
    /// Fold index to train (0-based)
    #[arg(long)]
    fold: Option<usize>,
    /// Number of cross-validation folds
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network input size as HxW
    #[arg(long)]
    input_size: Option<String>,
    /// Stage widths, comma-separated
    #[arg(long)]
    widths: Option<String>,
    /// Stage strides, comma-separated
    #[arg(long)]
    strides: Option<String>,
    /// Additive brightness range as lo,hi
    #[arg(long)]
    brightness: Option<String>,
    /// Contrast factor range as lo,hi
    #[arg(long)]
    contrast: Option<String>,
    /// Rotation range in degrees as lo,hi
    #[arg(long)]
    rotation: Option<String>,
    /// Scale factor range as lo,hi
    #[arg(long)]
    scale: Option<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Fold index to evaluate (must match the training split parameters)
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Number of folds used at training time
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Split seed used at training time
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Metrics CSV path; the ROC staircase lands next to it
    #[arg(long)]
    out: PathBuf,
    /// Restrict every study to images of one view (1-6)
    #[arg(long)]
    single_view: Option<u8>,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with manifest.jsonl plus the image and mask files
    #[arg(long)]
    study_dir: PathBuf,
}

#[derive(clap::Args)]
struct ExportRocArgs {
    /// Directory containing roc_fold<k>.csv staircases written by eval
    #[arg(long)]
    metrics_dir: PathBuf,
    /// Mean-curve CSV path; fold copies and the legend land next to it
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    /// Merge flags over the config file over defaults.
    fn resolve(&self) -> Result<TrainSetup> {
        let file = match &self.config {
            Some(path) => ConfigFile::load(path)?,
            None => ConfigFile::default(),
        };
        let manifest = self
            .manifest
            .clone()
            .or(file.data.manifest)
            .context("--manifest (or [data] manifest) is required")?;
        let out = self
            .out
            .clone()
            .or(file.output.out)
            .context("--out (or [output] out) is required")?;
        let variant = self
            .variant
            .clone()
            .or(file.model.variant)
            .context("--variant (or [model] variant) is required")?;

        let parse_flag_size = |s: &Option<String>| s.as_deref().map(config::parse_size).transpose();
        let parse_flag_list =
            |s: &Option<String>| s.as_deref().map(config::parse_usize_list).transpose();
        let parse_flag_range =
            |s: &Option<String>| s.as_deref().map(config::parse_range).transpose();

        let input_size = parse_flag_size(&self.input_size)?
            .map(|(h, w)| [h, w])
            .or(file.model.input_size)
            .unwrap_or([64, 64]);
        let setup = TrainSetup {
            data: DataEcho { manifest },
            model: ModelEcho {
                variant,
                norm: self.norm.clone().or(file.model.norm).unwrap_or_else(|| "instance".into()),
                input_size,
                widths: parse_flag_list(&self.widths)?
                    .or(file.model.widths)
                    .unwrap_or_else(|| vec![16, 32, 64]),
                strides: parse_flag_list(&self.strides)?
                    .or(file.model.strides)
                    .unwrap_or_else(|| vec![1, 2, 2]),
            },
            train: TrainEcho {
                fold: self.fold.or(file.train.fold).unwrap_or(0),
                folds: self.folds.or(file.train.folds).unwrap_or(5),
                epochs: self.epochs.or(file.train.epochs).unwrap_or(30),
                lr: self.lr.or(file.train.lr).unwrap_or(1e-3),
                batch_size: self.batch_size.or(file.train.batch_size).unwrap_or(8),
                seed: self.seed.or(file.train.seed).unwrap_or(0),
            },
            augment: AugmentEcho {
                brightness: parse_flag_range(&self.brightness)?
                    .or(file.augment.brightness)
                    .unwrap_or([-0.1, 0.1]),
                contrast: parse_flag_range(&self.contrast)?
                    .or(file.augment.contrast)
                    .unwrap_or([0.8, 1.2]),
                rotation_deg: parse_flag_range(&self.rotation)?
                    .or(file.augment.rotation_deg)
                    .unwrap_or([-10.0, 10.0]),
                scale: parse_flag_range(&self.scale)?
                    .or(file.augment.scale)
                    .unwrap_or([0.9, 1.1]),
            },
            output: OutputEcho { out },
        };
        // fail fast on unparsable names before any data loads
        setup.variant()?;
        setup.norm()?;
        Ok(setup)
    }
}

/// Parallelism cap from HFUS_THREADS (default 1). All kernels are currently
/// single-threaded, so the cap is validated and recorded but imposes nothing.
fn thread_cap() -> Result<usize> {
    match std::env::var("HFUS_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(e).context("reading HFUS_THREADS"),
        Ok(text) => {
            let n: usize =
                text.parse().with_context(|| format!("HFUS_THREADS={text:?} is not a number"))?;
            ensure!(n >= 1, "HFUS_THREADS must be at least 1, got {n}");
            Ok(n)
        }
    }
}

fn run() -> Result<()> {
    let _threads = thread_cap()?;
    match Cli::parse().command {
        Command::GenData(args) => {
            ensure!(
                args.min_images >= 1 && args.min_images <= args.max_images,
                "invalid image count range {}..={}",
                args.min_images,
                args.max_images
            );
            commands::gen_data(&commands::GenDataParams {
                out: args.out,
                studies: args.studies,
                seed: args.seed,
                min_images: args.min_images,
                max_images: args.max_images,
                confounder: config::parse_confounder(&args.confounder)?,
                image_size: config::parse_size(&args.image_size)?,
            })
        }
        Command::Train(args) => commands::train(&args.resolve()?),
        Command::Eval(args) => commands::eval(&commands::EvalParams {
            checkpoint: args.checkpoint,
            manifest: args.manifest,
            fold: args.fold,
            folds: args.folds,
            seed: args.seed,
            out: args.out,
            single_view: args.single_view,
        }),
        Command::Predict(args) => commands::predict(&args.checkpoint, &args.study_dir),
        Command::ExportRoc(args) => commands::export_roc(&args.metrics_dir, &args.out),
    }
}

fn main() {
    // Die quietly when a pipe consumer (e.g. `hfus eval | head`) closes
    // stdout early, like other Unix tools, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
