//! Configuration-driven runner around `qsr-core`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
mod error;
pub mod output;

pub use error::CliError;

use config::{CommcostRun, MomentsRun, ScheduleRun, SdeRun, TrainRun};
use output::OutDir;

#[derive(Debug, Parser)]
#[command(
    name = "qsr-lab",
    version,
    about = "Local SGD / AdamW synchronization-rule lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Expand a learning-rate schedule and, optionally, its synchronization rounds.
    Schedule(CommonArgs),
    /// Run data-parallel or local training on a synthetic problem.
    Train(CommonArgs),
    /// Integrate slow SDEs on a minimizer manifold.
    Sde(CommonArgs),
    /// Estimate one-round moments of local SGD against the slow SDE.
    Moments(CommonArgs),
    /// Predict wall-clock times from two measured runs.
    Commcost(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML or JSON file (chosen by extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Schedule(a)
            | Command::Train(a)
            | Command::Sde(a)
            | Command::Moments(a)
            | Command::Commcost(a) => a,
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let args = cli.command.args();
    let pool = match args.threads {
        Some(0) => return Err(CliError::config("threads", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| CliError::config("threads", e.to_string()))?;
    let threads = pool.current_num_threads();
    pool.install(|| dispatch(&cli.command, args, threads))
}

fn dispatch(command: &Command, args: &CommonArgs, threads: usize) -> Result<(), CliError> {
    // Configs are parsed before anything is written.
    let out = || OutDir::create(&args.out);
    match command {
        Command::Schedule(_) => {
            let cfg: ScheduleRun = config::load(&args.config)?;
            warn_unused_seed(args);
            commands::schedule(&cfg, &out()?, threads)?;
        }
        Command::Train(_) => {
            let mut cfg: TrainRun = config::load(&args.config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            commands::train(&cfg, &out()?, threads)?;
        }
        Command::Sde(_) => {
            let mut cfg: SdeRun = config::load(&args.config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            commands::sde(&cfg, &out()?, threads)?;
        }
        Command::Moments(_) => {
            let mut cfg: MomentsRun = config::load(&args.config)?;
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            commands::moments(&cfg, &out()?, threads)?;
        }
        Command::Commcost(_) => {
            let cfg: CommcostRun = config::load(&args.config)?;
            warn_unused_seed(args);
            commands::commcost(&cfg, &out()?, threads)?;
        }
    }
    Ok(())
}

fn warn_unused_seed(args: &CommonArgs) {
    if args.seed.is_some() {
        eprintln!("note: --seed has no effect on this command");
    }
}
