//! Thin command-line front end; all behaviour lives in the library.
//!
//! Exit codes: 0 success, 2 config error, 3 missing prerequisite,
//! 4 numerical divergence, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use selfmentor::config::RunConfig;
use selfmentor::pipeline::{self, Command};

#[derive(Parser)]
#[command(
    name = "selfmentor",
    about = "Few-shot capsule segmentation with a referee-mentored U-net trio",
    version
)]
struct Cli {
    /// Run configuration file (flat `key = value` lines); defaults apply
    /// when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Export synthetic corrupted/clean mask pairs as PNG files.
    GenMasks,
    /// Phase 1: train the mask-correcting referee on synthetic pairs.
    TrainReferee,
    /// Phase 2: pretrain the trainee on the labeled pairs.
    PretrainTrainee,
    /// Phase 3: train the mask-to-image reverse net.
    TrainReverse,
    /// Phase 4: consistency/reconstruction training with curriculum.
    TrainMain,
    /// Teacher/student pseudo-label baseline.
    SelfTrainBaseline,
    /// Evaluate the final trainee checkpoint on the test split.
    Evaluate,
    /// Phases 1-4 plus evaluation, averaged over the configured seeds.
    FullPipeline,
    /// Write before/after augmentation images for visual audit.
    AugmentPreview,
}

impl From<&CliCommand> for Command {
    fn from(cmd: &CliCommand) -> Command {
        match cmd {
            CliCommand::GenMasks => Command::GenMasks,
            CliCommand::TrainReferee => Command::TrainReferee,
            CliCommand::PretrainTrainee => Command::PretrainTrainee,
            CliCommand::TrainReverse => Command::TrainReverse,
            CliCommand::TrainMain => Command::TrainMain,
            CliCommand::SelfTrainBaseline => Command::SelfTrainBaseline,
            CliCommand::Evaluate => Command::Evaluate,
            CliCommand::FullPipeline => Command::FullPipeline,
            CliCommand::AugmentPreview => Command::AugmentPreview,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => RunConfig::load(path),
        None => Ok(RunConfig::default()),
    };
    let mut config = match config {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("selfmentor: {err}");
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }

    match pipeline::run(Command::from(&cli.command), &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("selfmentor: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
