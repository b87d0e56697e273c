mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mepoi", version, about = "Mobility-embedded POI representations")]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config's `seed`.
    #[arg(long, global = true, env = "MEPOI_SEED")]
    seed: Option<u64>,
    /// Worker threads, overriding the config's `threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every parallel map sequentially.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Synthetic world, labels and GPS traces.
    Generate,
    /// Staypoints, visits, sequences and the anchor/sparse partition.
    Preprocess,
    /// Transferred priors for sparse POIs.
    Precompute,
    /// Train the model, resuming an incomplete checkpoint.
    Pretrain,
    /// Write one prompt file per POI.
    ExportPrompts,
    /// Write the prototype matrix of the checkpoint.
    ExportEmbeddings,
    /// Probe the frozen embeddings on every task.
    Finetune,
    /// Print the probe summary table.
    Report,
    /// Print the default configuration.
    DefaultConfig,
}

fn run() -> anyhow::Result<()> {
    let help = format!("Configuration keys and defaults:\n{}", config::key_listing());
    let matches = Cli::command().after_help(help).get_matches();
    let cli = Cli::from_arg_matches(&matches)?;

    if cli.command == Command::DefaultConfig {
        print!("{}", config::default_toml());
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    mepoi_core::par::init_threads(cfg.threads);
    mepoi_core::par::set_deterministic(cli.deterministic);
    stages::run(cli.command, &cfg, cli.force)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(clap_err) = e.downcast_ref::<clap::Error>() {
                clap_err.exit();
            }
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
