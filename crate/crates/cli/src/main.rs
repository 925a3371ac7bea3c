mod config;
mod error;
mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, PipelineConfig};
use crate::error::CliError;
use crate::stages::Ctx;

/// Unsupervised defect detection on composite layup depth maps.
#[derive(Debug, Parser)]
#[command(name = "towscan", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with pipeline settings; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Manifest (or directory holding one); a single .pgm for preprocess and detect-tows.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory; a single file for preprocess and detect-tows on a .pgm.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    window: Option<usize>,
    #[arg(long, global = true)]
    stride: Option<usize>,
    #[arg(long, global = true)]
    tow_count: Option<usize>,
    /// Comma-separated blob scales in window steps.
    #[arg(long, global = true, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    /// Fixed detection floor on the anomaly signal.
    #[arg(long, global = true)]
    floor: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Write a synthetic corpus with ground truth.
    SynthGen,
    /// Median filter and min-max normalize.
    Preprocess,
    /// Locate tow boundaries and centerlines.
    DetectTows,
    /// Cut windows along each centerline.
    Extract,
    /// Train the autoencoder on the train split.
    Train,
    /// Train one model per configured latent size and compare them.
    SweepLatent,
    /// Reconstruction error per window.
    Score,
    /// Pick the ROC threshold on the labeled test windows.
    Threshold,
    /// Turn anomaly signals into defect boxes.
    Localize,
    /// Classification and localization report.
    Evaluate,
    /// Draw overlays as PPM images.
    Render,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthGen => "synth-gen",
            Command::Preprocess => "preprocess",
            Command::DetectTows => "detect-tows",
            Command::Extract => "extract",
            Command::Train => "train",
            Command::SweepLatent => "sweep-latent",
            Command::Score => "score",
            Command::Threshold => "threshold",
            Command::Localize => "localize",
            Command::Evaluate => "evaluate",
            Command::Render => "render",
        }
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let c = cli.common;
    let overrides = Overrides {
        seed: c.seed,
        window: c.window,
        stride: c.stride,
        tow_count: c.tow_count,
        latent_dim: c.latent_dim,
        epochs: c.epochs,
        batch_size: c.batch_size,
        scales: c.scales,
        floor: c.floor,
    };
    let ctx = Ctx {
        cfg: PipelineConfig::load(c.config.as_deref(), &overrides)?,
        input: c.input,
        output: c.output,
    };
    match cli.command {
        Command::SynthGen => stages::synth_gen(&ctx),
        Command::Preprocess => stages::preprocess(&ctx),
        Command::DetectTows => stages::detect(&ctx),
        Command::Extract => stages::extract(&ctx),
        Command::Train => stages::train(&ctx),
        Command::SweepLatent => stages::sweep(&ctx),
        Command::Score => stages::score(&ctx),
        Command::Threshold => stages::threshold(&ctx),
        Command::Localize => stages::localize(&ctx),
        Command::Evaluate => stages::evaluate(&ctx),
        Command::Render => stages::render_stage(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::new("usage", e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json("parse"));
            return ExitCode::from(2);
        }
    };
    let stage = cli.command.name();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json(stage));
            ExitCode::FAILURE
        }
    }
}
