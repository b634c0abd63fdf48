// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use resscale::BlockAddress;

/// Finds scale-invariant channels in a residual network and tests them by
/// mean ablation under scale-transformed evaluation.
#[derive(Debug, Parser)]
#[command(name = "resscale", version)]
pub struct Cli {
    /// Pipeline configuration (TOML). Built-in defaults when omitted.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config value, e.g. `--set dataset.subset_fraction=0.05`.
    /// Overrides are part of the effective config and its hash.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Print a JSON summary of the results to standard output.
    #[arg(long, global = true)]
    pub print: bool,

    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Visualize one channel at In, Pre and Post, center neuron and whole
    /// channel.
    Visualize {
        #[arg(long)]
        block: BlockAddress,
        #[arg(long)]
        channel: usize,
    },
    /// Screen every channel of the configured blocks against both criteria.
    Screen {
        /// Blocks to screen instead of `screen.blocks`.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<BlockAddress>>,
    },
    /// Run the ablation experiment on the configured blocks.
    Ablate {
        /// Blocks to ablate instead of `ablate.blocks`.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<BlockAddress>>,
    },
    /// Render channel grids and ratio plots from existing artifacts.
    Report,
    /// Run the synthetic-network checks.
    Selftest,
}
