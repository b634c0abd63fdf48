// SPDX-License-Identifier: MIT OR Apache-2.0

mod args;
mod pipeline;
mod selftest;

use std::io::IsTerminal;
use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use crate::args::{Cli, Command};
use crate::pipeline::{Completion, Pipeline, UsageError};

fn init_logging(verbose: u8, quiet: bool) {
    let default = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        (false, _) => "trace",
    };
    let filter = EnvFilter::try_from_env("RESSCALE_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).with_ansi(std::io::stderr().is_terminal()).with_target(false).init();
}

/// Usage problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<resscale::Error>() {
        Some(resscale::Error::Config(_) | resscale::Error::InvalidAddress { .. } | resscale::Error::InvalidChannel { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<Completion> {
    if let Command::Selftest = cli.command {
        return selftest::run(cli.print);
    }
    let pipeline = Pipeline::from_cli(&cli)?;
    if pipeline.config.workers > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(pipeline.config.workers).build_global()?;
    }
    match &cli.command {
        Command::Visualize { block, channel } => pipeline.visualize(*block, *channel),
        Command::Screen { .. } => pipeline.screen(),
        Command::Ablate { .. } => pipeline.ablate(),
        Command::Report => pipeline.report(),
        Command::Selftest => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(Completion::Full) => ExitCode::SUCCESS,
        Ok(Completion::Partial) => ExitCode::from(3),
        Err(err) => {
            tracing::error!("{err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
