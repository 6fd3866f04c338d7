//! `critinit`: signal-propagation theory and finite-width measurements for
//! random MLPs from the command line.
//!
//! Exit codes: 0 on success, 2 for bad arguments, 1 when a computation or
//! file operation fails.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};
use critinit::exec::Execution;

use args::{resolve, Cli, Command, McCommand};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<critinit::Error> for Failure {
    fn from(e: critinit::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Usage("worker count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::TheoryTrace(a) => commands::theory_trace(resolve(a)?),
        Command::Critical(a) => commands::critical(resolve(a)?, exec),
        Command::PhaseDiagram(a) => commands::phase_diagram(resolve(a)?, exec),
        Command::Mc(McCommand::Chi(a)) => commands::mc_chi(resolve(a)?, exec),
        Command::Mc(McCommand::Profile(a)) => commands::mc_profile(resolve(a)?, exec),
        Command::Mc(McCommand::Ntk(a)) => commands::mc_ntk(resolve(a)?, exec),
        Command::Mc(McCommand::N0check(a)) => commands::mc_n0check(resolve(a)?, exec),
        Command::Fit(a) => commands::fit(resolve(a)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => Cli::command().error(ErrorKind::ValueValidation, msg).exit(),
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
