mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evtex_core::config::Preset;

use crate::error::{CliError, Result};

#[derive(Parser)]
#[command(name = "evtex", version, about = "Event-camera adversarial texture toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config (TOML), merged over the preset.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the attack and detector-training seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse().map_err(|e: evtex_core::Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to PGM frames and ground-truth boxes.
    Render(commands::RenderArgs),
    /// Convert a directory of PGM frames to an event file.
    V2e(commands::V2eArgs),
    /// Train the surrogate detector.
    TrainDetector(commands::TrainArgs),
    /// Optimize an adversarial texture against a trained detector.
    Attack(commands::AttackArgs),
    /// Evaluate baseline and optimized textures.
    Eval(commands::EvalArgs),
    /// Per-bin event images and detection overlays.
    Visualize(commands::VisualizeArgs),
    /// Run the oracle and gradient suites.
    Selftest,
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("EVTEX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("EVTEX_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("EVTEX_THREADS: {e}")))
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Render(a) => commands::render(a).map(|_| true),
        Command::V2e(a) => commands::v2e(a).map(|_| true),
        Command::TrainDetector(a) => commands::train_detector(a).map(|_| true),
        Command::Attack(a) => commands::attack(a).map(|_| true),
        Command::Eval(a) => commands::eval(a).map(|_| true),
        Command::Visualize(a) => commands::visualize(a).map(|_| true),
        Command::Selftest => Ok(commands::selftest()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
