//! `stegozoo` command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 zoo generation failure.

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod runconfig;

use args::{Cli, Command, DetectCommand, ZooCommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Generation(String),
    Runtime(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Generation(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Generation(m) => write!(f, "generation failed: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<stegozoo::Error> for CliError {
    fn from(e: stegozoo::Error) -> Self {
        use stegozoo::Error as E;
        match e {
            E::Generation { .. } | E::Divergence { .. } => CliError::Generation(e.to_string()),
            E::Argument(_) | E::RegionBounds { .. } | E::Capacity { .. } | E::ArchMismatch(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let ctx = commands::Context { home: cli.home, strict: cli.strict };
    match cli.command {
        Command::Zoo(ZooCommand::Gen(a)) => commands::zoo_gen(&ctx, a),
        Command::Attack(a) => commands::attack(&ctx, a),
        Command::Extract(a) => commands::extract(&ctx, a),
        Command::Features(a) => commands::features(&ctx, a),
        Command::Detect(DetectCommand::Train(a)) => commands::detect_train(&ctx, a),
        Command::Detect(DetectCommand::Eval(a)) => commands::detect_eval(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
        Command::Inspect(a) => commands::inspect(&ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stegozoo: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
