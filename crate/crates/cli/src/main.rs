//! `sttm` command-line front end.
//!
//! Exit codes: 0 success, 1 internal failure, 2 usage error, 3 data error.

mod args;
mod datasets;
mod output;
mod run;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Errors that map to dedicated exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for Failure {}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => 2,
                Failure::Data(_) => 3,
            };
        }
        if let Some(core) = cause.downcast_ref::<sttm_core::Error>() {
            return match core {
                sttm_core::Error::Format { .. } | sttm_core::Error::Io(_) | sttm_core::Error::EmptyClass(_) => 3,
                sttm_core::Error::InvalidArgument(_) | sttm_core::Error::RankBound { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

fn init_pool(workers: usize) {
    if workers > 0 {
        // Fails only if a pool already exists, which keeps the existing one.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => {
            init_pool(a.workers);
            run::train(a)
        }
        Command::Eval(a) => {
            init_pool(a.workers);
            run::eval(a)
        }
        Command::Sweep(a) => {
            init_pool(a.workers);
            run::sweep(a)
        }
        Command::AblateCanonical(a) => {
            init_pool(a.workers);
            run::ablate(a)
        }
        Command::Rerun(a) => {
            init_pool(a.workers);
            run::rerun(a)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
