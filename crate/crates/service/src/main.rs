use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use majorness_service::pipeline::{run_stage, Stage};
use majorness_service::study::{Study, SystemClock};
use majorness_service::StudyConfig;

#[derive(Parser)]
#[command(name = "majorness", version, about = "Run a majorness annotation study and its analysis pipeline")]
struct Cli {
    /// Study directory; overrides `data_dir` from the config file.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Master seed for every randomized step; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file with study settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the annotation API (and optionally the web UI).
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Directory of static UI files served at `/`.
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Write a synthetic corpus with simulated annotations.
    Simulate,
    /// Fit the pairwise ranking.
    Rank,
    /// Select anchors from the ranking.
    Anchors,
    /// Reliability analysis and rater filtering.
    Reliability,
    /// Compute mel-spectrogram features.
    Features,
    /// Train the majorness regressor.
    Train,
    /// Evaluate predictions and mode classification.
    Evaluate,
    /// Run rank, anchors, reliability, features, train and evaluate.
    All,
}

fn load_config(cli: &Cli) -> Result<(StudyConfig, PathBuf), String> {
    let mut config = match &cli.config {
        Some(path) => StudyConfig::load(path).map_err(|e| e.to_string())?,
        None => StudyConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(dir) = &cli.data_dir {
        config.data_dir = Some(dir.clone());
    }
    config.validate().map_err(|e| e.to_string())?;
    let dir = config.data_dir.clone().ok_or("no study directory: pass --data-dir or set data_dir in the config")?;
    Ok((config, dir))
}

fn run(cli: Cli) -> Result<(), String> {
    let (config, dir) = load_config(&cli)?;
    let stage = match cli.command {
        Command::Serve { addr, ui_dir } => {
            let study = Study::open(&dir, &config, Arc::new(SystemClock)).map_err(|e| e.to_string())?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            return runtime.block_on(majorness_service::server::serve(Arc::new(study), addr, ui_dir)).map_err(|e| e.to_string());
        }
        Command::Simulate => Stage::Simulate,
        Command::Rank => Stage::Rank,
        Command::Anchors => Stage::Anchors,
        Command::Reliability => Stage::Reliability,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::All => Stage::All,
    };
    let summary = run_stage(&dir, &config, stage).map_err(|e| e.to_string())?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summaries serialize"));
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
