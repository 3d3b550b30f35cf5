//! `tsnas`: search, retrain, evaluate, profile and inspect forecasting architectures.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 failure while running.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod log;

use commands::CliError;

#[derive(Parser)]
#[command(name = "tsnas", version, about = "Hierarchical architecture search for multivariate forecasting")]
struct Cli {
    /// Library log level on stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info",
          value_parser = ["off", "error", "warn", "info", "debug", "trace"])]
    log_level: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides DARTS_TS_SEED and the configured seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory instead of the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search the supernet at the smallest horizon, prune, write genotype.json and audit.jsonl.
    Search {
        #[command(flatten)]
        run: RunArgs,
        /// Keep a checkpoint after every search epoch.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Retrain a genotype for every configured horizon and seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, short)]
        genotype: PathBuf,
    },
    /// Test metrics of a trained model against naive baselines.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Model checkpoint written by `train`.
        #[arg(long, short)]
        model: PathBuf,
        /// Seasonal-naive period; defaults to min(24, lookback).
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Forward/backward timing and memory of a genotype on random input.
    Profile {
        #[arg(long, short)]
        genotype: PathBuf,
        #[arg(long, short, default_value_t = 32)]
        batch: usize,
        #[arg(long, short, default_value_t = 96)]
        lookback: usize,
        #[arg(long = "horizon", default_value_t = 96)]
        horizon: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        json: bool,
    },
    /// Print a genotype's cells, edges, decoder, head and macro weights.
    Show {
        #[arg(long, short)]
        genotype: PathBuf,
        /// Also write a DOT graph to this file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
}

fn resolve(run: &RunArgs) -> Result<config::Resolved, CliError> {
    config::load(&run.config, run.seed, run.out.as_deref()).map_err(CliError::Invalid)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Search { run, checkpoints } => {
            let r = resolve(&run)?;
            commands::search(&r, checkpoints).map(|_| ())
        }
        Cmd::Train { run, genotype } => {
            // both inputs are checked before anything is written
            let r = resolve(&run);
            let g = commands::read_genotype(&genotype);
            match (r, g) {
                (Ok(r), Ok(g)) => commands::train(&r, &g).map(|_| ()),
                (Err(CliError::Invalid(mut a)), Err(CliError::Invalid(b))) => {
                    a.extend(b);
                    Err(CliError::Invalid(a))
                }
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        }
        Cmd::Eval { run, model, period, json } => {
            let r = resolve(&run)?;
            commands::eval(&r, &model, period, json).map(|_| ())
        }
        Cmd::Profile { genotype, batch, lookback, horizon, reps, json } => {
            let g = commands::read_genotype(&genotype)?;
            commands::profile_cmd(&g, batch, lookback, horizon, reps, json)
        }
        Cmd::Show { genotype, dot } => {
            let g = commands::read_genotype(&genotype)?;
            commands::show(&g, dot.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    log::init(cli.log_level.parse().unwrap_or(::log::LevelFilter::Info));
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Invalid(errs) => {
                    for m in errs {
                        eprintln!("{}", serde_json::json!({ "level": "error", "kind": "invalid", "msg": m }));
                        println!("error: {m}");
                    }
                }
                CliError::Runtime(m) => {
                    eprintln!("{}", serde_json::json!({ "level": "error", "kind": "runtime", "msg": m }));
                    println!("error: {m}");
                }
            }
            ExitCode::from(e.code() as u8)
        }
    }
}
