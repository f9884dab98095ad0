//! `memgym`: generate blueprints, run episodes, score, evolve and report.

mod backends;
mod cli;
mod commands;
mod config;
mod error;
mod output;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use crate::cli::{Cli, Command};
use crate::commands::ScoreKind;
use crate::config::Settings;
use crate::error::{classify, structured, ExitKind};

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let settings = Settings::resolve(&cli.global)?;
    match &cli.command {
        Command::Gen(args) => commands::gen(&cli.global, settings, args),
        Command::Run(args) => commands::run(&cli.global, settings, args),
        Command::Eval(args) => commands::score(ScoreKind::Eval, settings, args),
        Command::Diagnose(args) => commands::score(ScoreKind::Diagnose, settings, args),
        Command::Evolve(args) => commands::evolve(&cli.global, settings, args),
        Command::Report(args) => commands::report(settings, args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let err = anyhow::Error::msg(e.kind().to_string());
            eprintln!("{}", structured(&err, ExitKind::Usage));
            return ExitCode::from(ExitKind::Usage as u8);
        }
    };
    init_logging(cli.global.verbose);
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = classify(&err);
            tracing::debug!(error = ?err, "command failed");
            eprintln!("{}", structured(&err, kind));
            ExitCode::from(kind as u8)
        }
    }
}
