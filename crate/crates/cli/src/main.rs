use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use delayprop::config::RunConfig;
use delayprop::exit_code;
use delayprop::stages::{self, Context};
use delayprop_core::error::Result;

/// Event-graph delay propagation forecasting.
#[derive(Debug, Parser)]
#[command(name = "delayprop", version)]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for training, day sampling and shuffles.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Workspace root (falls back to the config, then `./workspace`).
    #[arg(long, global = true, env = "DELAYPROP_WORKSPACE")]
    workspace: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic stop-level dataset with its propagation log.
    Synth,
    /// Assign trip ids and clean stop records.
    Ingest {
        /// Stop-level CSV; defaults to `paths.input` or the synthetic output.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Build and serialize day graphs, the day split and the preprocessor.
    Graph,
    /// Train the hurdle models and the one-shot baseline.
    Train,
    /// Run live rollouts and baselines on sampled held-out days.
    Forecast,
    /// Score prediction logs: metrics, edge propagation error, subgroups.
    Eval,
    /// Attention analysis and permutation feature importance.
    Explain,
    /// Every stage on synthetic data.
    Pipeline,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .finalize(cli.seed)?;
    env_logger::Builder::new()
        .parse_filters(&std::env::var("RUST_LOG").unwrap_or_else(|_| cfg.log_level.clone()))
        .format_timestamp(None)
        .init();
    let workspace = cli
        .workspace
        .or_else(|| cfg.paths.workspace.clone())
        .unwrap_or_else(|| PathBuf::from("workspace"));
    let ctx = Context {
        cfg,
        workspace,
        jobs: cli.jobs.max(1),
    };
    match cli.command {
        Command::Synth => stages::synth(&ctx),
        Command::Ingest { input } => stages::ingest(&ctx, input.as_deref()),
        Command::Graph => stages::graph(&ctx),
        Command::Train => stages::train_models(&ctx),
        Command::Forecast => stages::forecast(&ctx),
        Command::Eval => stages::evaluate(&ctx),
        Command::Explain => stages::explain(&ctx),
        Command::Pipeline => stages::pipeline(&ctx),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
