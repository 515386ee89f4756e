//! `dprobe`: prepare a treebank, train layer-wise structural probes, score
//! them and analyse agreement items.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! runtime failures.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;
mod source;

use commands::Options;
use config::RunConfig;

/// A problem with the user's input rather than with the run itself.
#[derive(Debug)]
pub struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

#[derive(Debug, Parser)]
#[command(name = "dprobe", version, about = "Layer-wise structural probing of dependency derivations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter the treebank, group it into structure sets and split it.
    Prepare(Args),
    /// Train one probe per seed and layer.
    Train(Args),
    /// Decode the test split and compute UUAS curves and expected layers.
    Evaluate(Args),
    /// Generate agreement items, or analyse scored ones.
    Agreement(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; defaults to the config value, then the CPU count.
    #[arg(long)]
    workers: Option<usize>,
    /// Keep finished units whose settings match.
    #[arg(long)]
    resume: bool,
    /// Print the plan without running it.
    #[arg(long)]
    dry_run: bool,
}

type Runner = fn(&RunConfig, Options) -> anyhow::Result<()>;

fn execute(command: Command) -> anyhow::Result<()> {
    let (args, run): (Args, Runner) = match command {
        Command::Prepare(a) => (a, commands::prepare::run),
        Command::Train(a) => (a, commands::train::run),
        Command::Evaluate(a) => (a, commands::evaluate::run),
        Command::Agreement(a) => (a, commands::agreement::run),
    };
    let cfg = RunConfig::load(&args.config)?;
    let workers = match args.workers.or(cfg.workers) {
        Some(0) => return Err(invalid("--workers must be at least 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    run(&cfg, Options { workers, resume: args.resume, dry_run: args.dry_run })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Invalid>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
