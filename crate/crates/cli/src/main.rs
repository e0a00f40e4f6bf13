//! `wbn`: generate benchmark data, train, evaluate, verify gradients and compare methods.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or configuration error,
//! 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use wbn_core::Error;

use crate::commands::Verdict;
use crate::config::{with_output_root, ExperimentConfig};

#[derive(Parser)]
#[command(name = "wbn", version, about = "Weighted batch normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source_1..N.wbnd and target.wbnd for the configured benchmark.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured mode; writes checkpoint, trace, report and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        /// Flip the sign of one backward rule; the run must then fail.
        #[arg(long)]
        inject_sign_error: bool,
    },
    /// Leave-one-domain-out table of several methods over several seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<Verdict> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            for path in commands::gen(&cfg, &with_output_root(&out))? {
                println!("{}", path.display());
            }
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = commands::train(&cfg)?;
            print!("{}", out.report);
            println!("outputs in {}", out.dir.display());
        }
        Command::Eval { ckpt, data, out } => {
            let report = commands::eval(&ckpt, &data)?;
            print!("{report}");
            if let Some(path) = out {
                let path = with_output_root(&path);
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    std::fs::create_dir_all(parent)?;
                }
                std::fs::write(&path, &report)?;
            }
        }
        Command::Gradcheck { inject_sign_error } => {
            let (table, verdict) = commands::gradcheck(inject_sign_error);
            print!("{table}");
            return Ok(verdict);
        }
        Command::Compare { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = commands::compare_methods(&cfg)?;
            print!("{}", out.table);
            println!("outputs in {}", out.dir.display());
        }
    }
    Ok(Verdict::Pass)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_) | Error::State(_)) => 3,
        Some(_) => 2,
        None if err.downcast_ref::<std::io::Error>().is_some() => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Pass) => ExitCode::SUCCESS,
        Ok(Verdict::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
