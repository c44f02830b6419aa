mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::{Cli, Command};

const WORKERS_ENV: &str = "AMLFS_WORKERS";

/// `AMLFS_WORKERS` wins over `--workers` when it is set.
fn resolve_workers(flag: u64) -> Result<usize, clap::Error> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Cli::command().error(
                ErrorKind::InvalidValue,
                format!("{WORKERS_ENV} must be a positive integer, got {v:?}"),
            )),
        },
        Err(_) => Ok(flag as usize),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Baseline(a) => commands::baseline(a),
        Command::Search(a) => match resolve_workers(a.workers) {
            Ok(workers) => commands::search(a, workers),
            Err(e) => e.exit(),
        },
        Command::Eval(a) => commands::eval(a),
        Command::ExportGrads(a) => commands::export_grads(a),
        Command::Replay(a) => commands::replay(&a.manifest, &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
