use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use wfmfg::io::{run, RunOptions, Subcommand};
use wfmfg::model::NoiseConvention;

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum Noise {
    Eps2,
    Eps,
}

/// Solvers, simulators and verification studies for weighted N-player games
/// with Wright-Fisher common noise.
///
/// Exit status: 0 when every check passes, 2 when a check fails, 1 on error.
#[derive(Debug, Parser)]
#[command(name = "wfmfg", version)]
struct Cli {
    #[arg(value_enum)]
    command: Subcommand,
    /// JSON config, or the manifest of an earlier run to reproduce it
    #[arg(long)]
    config: PathBuf,
    /// root seed; overrides the config and the manifest
    #[arg(long)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// worker threads (all cores by default)
    #[arg(long)]
    threads: Option<usize>,
    /// common-noise coefficient of the limit: eps^2 or eps
    #[arg(long, value_enum)]
    noise_convention: Option<Noise>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let opts = RunOptions {
        config: cli.config,
        out: cli.out,
        seed: cli.seed,
        threads: cli.threads,
        noise: cli.noise_convention.map(|n| match n {
            Noise::Eps2 => NoiseConvention::Eps2,
            Noise::Eps => NoiseConvention::Eps,
        }),
    };
    match run(cli.command, &opts) {
        Ok(outcome) => {
            for v in &outcome.verdicts {
                println!("{} {}", if v.pass { "pass" } else { "FAIL" }, v.name);
            }
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
