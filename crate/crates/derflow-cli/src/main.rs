//! `derflow` — synthesize, bound, and stress-test decentralized affine
//! control policies for storage and PV inverters on radial feeders.
//!
//! Exit codes: 0 success, 1 problem certified infeasible, 2 bad input or
//! configuration, 3 numerical solver failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "derflow",
    version,
    about = "Robust decentralized control for distribution-feeder storage and PV inverters",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse a config file and report the scenario it describes.
    Validate {
        /// TOML scenario description.
        config: PathBuf,
    },
    /// Solve the worst-case program and write the resulting policy.
    Synthesize {
        /// TOML scenario description.
        config: PathBuf,
        /// Where to write the policy file.
        #[arg(short, long, default_value = "policy.csv")]
        out: PathBuf,
        /// Optional key,value CSV with objective and solve statistics.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Solve the moment relaxation that floors every admissible policy.
    Bound {
        /// TOML scenario description.
        config: PathBuf,
    },
    /// Monte Carlo rollout of a policy against sampled disturbances.
    Simulate {
        /// TOML scenario description.
        config: PathBuf,
        /// Policy file produced by `synthesize`.
        #[arg(long, conflicts_with = "zero_policy")]
        policy: Option<PathBuf>,
        /// Roll out the do-nothing policy instead of a file.
        #[arg(long)]
        zero_policy: bool,
        /// Number of Monte Carlo samples (default from config, else 10000).
        #[arg(long)]
        samples: Option<usize>,
        /// Random seed (default from config, else 1).
        #[arg(long)]
        seed: Option<u64>,
        /// Also run the fine-timescale rollout with this many redraws per
        /// period.
        #[arg(long, value_name = "SUBSTEPS")]
        fast: Option<usize>,
        /// Directory for the CSV outputs.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Synthesize and bound across the config's parameter grid.
    Sweep {
        /// TOML scenario description with a [sweep] section.
        config: PathBuf,
        /// Where to write the sweep table CSV.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Validate { config } => commands::cmd_validate(config),
        Cmd::Synthesize { config, out, summary } => {
            commands::cmd_synthesize(config, out, summary.as_deref())
        }
        Cmd::Bound { config } => commands::cmd_bound(config),
        Cmd::Simulate { config, policy, zero_policy, samples, seed, fast, out_dir } => {
            commands::cmd_simulate(
                config,
                policy.as_deref(),
                *zero_policy,
                *samples,
                *seed,
                *fast,
                out_dir,
            )
        }
        Cmd::Sweep { config, out } => commands::cmd_sweep(config, out.as_deref()),
    };
    if let Err(f) = result {
        eprintln!("error: {}", f.message);
        std::process::exit(f.code);
    }
}
