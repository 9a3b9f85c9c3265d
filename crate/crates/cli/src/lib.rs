//! Single-executable pipeline driver with subcommands for dataset
//! generation, geometric alignment, CNN/SAE/PCA/JB training, feature
//! extraction, and the verification/identification protocols.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric
//! divergence.

pub mod commands;
pub mod common;
pub mod settings;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use mmdfr_core::fusion::FusionError;
use mmdfr_core::nn::NetError;

#[derive(Parser)]
#[command(
    name = "mmdfr",
    version,
    about = "Multimodal face representation pipeline",
    propagate_version = true
)]
pub struct Cli {
    /// Line-based `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master RNG seed (overrides the config `seed` key).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for feature extraction.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Print the files the command would read/write, then exit.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled face dataset (images, manifest,
    /// optional verification pairs).
    Synth(commands::SynthArgs),
    /// Produce the eight aligned modality images for every manifest record.
    Align(commands::AlignArgs),
    /// Extract per-modality features or fused signatures into feature
    /// stores.
    Extract(commands::ExtractArgs),
    /// Two-stage training (softmax, then triplet fine-tuning) of one
    /// modality's network.
    TrainCnn(commands::TrainCnnArgs),
    /// Greedy layer-wise training of the fusion stacked auto-encoder.
    TrainSae(commands::TrainSaeArgs),
    /// Fit the PCA projection used by the supervised matcher.
    TrainPca(commands::TrainPcaArgs),
    /// Fit the Joint Bayesian model on PCA-projected features.
    TrainJb(commands::TrainJbArgs),
    /// Ten-fold pair verification with cosine or PCA+JB scoring.
    Verify(commands::VerifyArgs),
    /// Gallery/probe identification with CMS curve output.
    Identify(commands::IdentifyArgs),
    /// Train and evaluate the three ReLU-usage variants side by side.
    AblateRelu(commands::AblateArgs),
    /// Per-subject image-count distribution report.
    ReportDist(commands::ReportDistArgs),
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Align(_) => "align",
        Command::Extract(_) => "extract",
        Command::TrainCnn(_) => "train-cnn",
        Command::TrainSae(_) => "train-sae",
        Command::TrainPca(_) => "train-pca",
        Command::TrainJb(_) => "train-jb",
        Command::Verify(_) => "verify",
        Command::Identify(_) => "identify",
        Command::AblateRelu(_) => "ablate-relu",
        Command::ReportDist(_) => "report-dist",
    };
    let mut run = settings::Run::new(
        name,
        cli.config.as_deref(),
        cli.seed,
        cli.threads,
        cli.dry_run,
    )?;
    match cli.command {
        Command::Synth(args) => commands::synth(&mut run, args)?,
        Command::Align(args) => commands::align(&mut run, args)?,
        Command::Extract(args) => commands::extract(&mut run, args)?,
        Command::TrainCnn(args) => commands::train_cnn(&mut run, args)?,
        Command::TrainSae(args) => commands::train_sae(&mut run, args)?,
        Command::TrainPca(args) => commands::train_pca(&mut run, args)?,
        Command::TrainJb(args) => commands::train_jb(&mut run, args)?,
        Command::Verify(args) => commands::verify(&mut run, args)?,
        Command::Identify(args) => commands::identify(&mut run, args)?,
        Command::AblateRelu(args) => commands::ablate_relu(&mut run, args)?,
        Command::ReportDist(args) => commands::report_dist(&mut run, args)?,
    }
    run.finish()
}

/// Maps an error chain to the documented exit codes: 4 for numeric
/// divergence, 3 for any other data/processing failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if matches!(cause.downcast_ref::<NetError>(), Some(NetError::Divergence { .. })) {
            return 4;
        }
        if matches!(
            cause.downcast_ref::<FusionError>(),
            Some(FusionError::Divergence { .. })
        ) {
            return 4;
        }
    }
    3
}
