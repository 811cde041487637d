use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use evacmob::config::PipelineConfig;
use evacmob::pipeline::{run_stage, PipelineError, Stage};

/// Evacuation behavior inference from GPS pings.
#[derive(Debug, Parser)]
#[command(name = "evacmob", version)]
struct Cli {
    /// Run configuration (TOML, or JSON by extension).
    #[arg(long, short, global = true, env = evacmob::config::CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Worker threads; overrides the config's `workers`. 0 uses all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Clean raw pings into per-user tracks.
    Ingest,
    /// Infer proxy home cells from tracks.
    Homes,
    /// Extract stay-point activities from tracks.
    Activities,
    /// Assign evacuation classes.
    Classify,
    /// Aggregate rates, curves, waves and sampling diagnostics.
    Metrics,
    /// Write a labelled synthetic scenario to the configured input paths.
    Synth,
    /// Bundle metrics with a run manifest.
    Report,
    /// Run ingest through report.
    All,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Self::Ingest => Stage::Ingest,
            Self::Homes => Stage::Homes,
            Self::Activities => Stage::Activities,
            Self::Classify => Stage::Classify,
            Self::Metrics => Stage::Metrics,
            Self::Synth => Stage::Synth,
            Self::Report => Stage::Report,
            Self::All => Stage::All,
        }
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), std::env::vars())?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .expect("thread pool");
    log::debug!("running {:?} on {} workers", cli.command, pool.current_num_threads());
    pool.install(|| run_stage(cli.command.stage(), &cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
