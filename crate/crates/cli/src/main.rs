//! `realitycheck`: batch fact generation, scoring, evaluation and analysis.
//!
//! Exit codes: 0 on success, 2 when some images failed but the rest were
//! written, 1 on configuration or fatal errors.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Outcome;
use crate::config::{GlobalArgs, Settings};

#[derive(Parser)]
#[command(
    name = "realitycheck",
    version,
    about = "Score image realism from contradictions between generated facts"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate facts for every manifest image and export them.
    Facts,
    /// Score every manifest image and write run records.
    Score,
    /// Cross-validate weights over image pairs from the cache.
    Eval,
    /// Weird-prediction rates given marker words and hallucinations.
    Analyze,
}

fn init_logging(level: &str) {
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let settings = match Settings::resolve(&cli.global) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    init_logging(&settings.log_level);

    let result = match cli.command {
        Command::Facts => commands::facts(&settings),
        Command::Score => commands::score(&settings),
        Command::Eval => commands::eval(&settings),
        Command::Analyze => commands::analyze(&settings),
    };
    match result {
        Ok(Outcome::Complete) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
