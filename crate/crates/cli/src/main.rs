use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

mod config;
mod output;
mod run;

use config::RunConfig;
use output::OutputDir;
use run::Verdict;

#[derive(Parser)]
#[command(name = "boltzsim", version, about = "Kinetic Monte Carlo for the Boltzmann jump SDE")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a run described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("BOLTZ_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("BOLTZ_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load(path: &PathBuf, seed: Option<u64>) -> std::result::Result<config::Validated, Vec<String>> {
    let mut cfg = RunConfig::load(path).map_err(|e| vec![e])?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()
}

fn report_errors(errs: &[String]) {
    eprintln!("invalid configuration:");
    for e in errs {
        eprintln!("  {e}");
    }
}

fn run(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<ExitCode> {
    let v = match load(&config, seed) {
        Ok(v) => v,
        Err(errs) => {
            report_errors(&errs);
            return Ok(ExitCode::from(1));
        }
    };
    configure_threads()?;
    let root = out.or_else(|| v.config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("boltzsim-out"));
    let digest = run::digest_of(&v.config)?;
    let mut dir = OutputDir::create(&root)?;
    let outcome = run::execute(&v, &mut dir)?;
    let root = dir.finish(v.config.mode.name(), v.config.seed, &digest)?;
    match outcome.verdict {
        Verdict::Pass => {
            println!("PASS: outputs in {}", root.display());
            Ok(ExitCode::SUCCESS)
        }
        Verdict::Fail => {
            println!("FAIL: outputs in {}", root.display());
            Ok(ExitCode::from(2))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(config, seed, out),
        Command::Validate { config } => match load(&config, None) {
            Ok(_) => {
                println!("ok");
                Ok(ExitCode::SUCCESS)
            }
            Err(errs) => {
                report_errors(&errs);
                Ok(ExitCode::from(1))
            }
        },
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(1)
    })
}
