//! factsteer command-line pipeline.
//!
//! The stages chain through files: build-bench pairs factual questions
//! with user histories; build-contrast generates and judges both prompt
//! conditions; scan-layers locates the intervention block; train-prober
//! fits the risk gate; build-steer assembles the steering artifact;
//! run-eval / ablate-history / analyze-entanglement / simulate evaluate
//! it; grid-search tunes (gamma, tau). Every command ends by printing one
//! machine-readable JSON summary line.

mod clients;
mod commands;
mod settings;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "factsteer", version, about = "Locate, probe, and steer personalization-induced factual drift")]
struct Cli {
    /// Optional TOML config file (flags override it).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for per-example scans.
    #[arg(long, global = true)]
    parallel: Option<usize>,

    /// Directory for cached external-client replies.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic user/fact corpora for offline runs.
    MakeFixtures(commands::MakeFixturesArgs),
    /// Pair factual questions with user histories via session retrieval.
    BuildBench(commands::BuildBenchArgs),
    /// Generate and judge both prompt conditions for every question.
    BuildContrast(commands::BuildContrastArgs),
    /// Locate the personalization-sensitive layer.
    ScanLayers(commands::ScanLayersArgs),
    /// Train the entanglement prober at the selected layer.
    TrainProber(commands::TrainProberArgs),
    /// Assemble the steering artifact (prober + steering vector + config).
    BuildSteer(commands::BuildSteerArgs),
    /// Evaluate a personalization method, optionally steered.
    RunEval(commands::RunEvalArgs),
    /// Sweep the retained-history ratio and score each point.
    AblateHistory(commands::AblateHistoryArgs),
    /// Compare response-representation shift for truthful vs hallucinated answers.
    AnalyzeEntanglement(commands::AnalyzeEntanglementArgs),
    /// Run the teacher-student knowledge-transfer simulation.
    Simulate(commands::SimulateArgs),
    /// Grid-search (gamma, tau) by Overall score on a validation split.
    GridSearch(commands::GridSearchArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = settings::load_config(cli.config.as_deref())?;
    if let Some(threads) = cli.parallel.or(config.parallel) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global()
            .ok();
    }
    let ctx = commands::Ctx {
        config,
        cache_dir: cli.cache_dir,
    };
    let summary = match cli.command {
        Command::MakeFixtures(args) => commands::make_fixtures(&ctx, args)?,
        Command::BuildBench(args) => commands::build_bench(&ctx, args)?,
        Command::BuildContrast(args) => commands::build_contrast(&ctx, args)?,
        Command::ScanLayers(args) => commands::scan_layers(&ctx, args)?,
        Command::TrainProber(args) => commands::train_prober(&ctx, args)?,
        Command::BuildSteer(args) => commands::build_steer(&ctx, args)?,
        Command::RunEval(args) => commands::run_eval(&ctx, args)?,
        Command::AblateHistory(args) => commands::ablate_history(&ctx, args)?,
        Command::AnalyzeEntanglement(args) => commands::analyze_entanglement(&ctx, args)?,
        Command::Simulate(args) => commands::simulate(&ctx, args)?,
        Command::GridSearch(args) => commands::grid_search(&ctx, args)?,
    };
    println!("{summary}");
    Ok(())
}
