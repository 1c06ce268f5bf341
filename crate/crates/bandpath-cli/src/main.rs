use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use bandpath_cli::config::RunConfig;
use bandpath_cli::runner::{run_converge, run_delta_p, run_sample, run_verify, RunContext};
use bandpath_cli::RayonExec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bandpath", version, about = "Band-constrained path simulation and identity checks")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all logical cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the integration-by-parts identity for every configured scenario.
    Verify,
    /// Estimate infinitesimal edge probabilities by their configured routes.
    DeltaP,
    /// Repeat an estimator over a grid-size schedule and extrapolate.
    Converge,
    /// Dump sampled paths as CSV for external plotting.
    Sample,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(status) => ExitCode::from(status as u8),
        Err(e) => {
            // Usage and config problems exit 2; numerical failures inside a
            // successfully parsed run exit 1 (handled in `run`).
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let config_path = cli
        .config
        .ok_or_else(|| anyhow::anyhow!("--config PATH is required"))?;
    let raw = fs::read_to_string(&config_path)
        .map_err(|e| anyhow::anyhow!("reading {config_path:?}: {e}"))?;
    let cfg = RunConfig::parse(&raw)?;
    let exec = RayonExec::new(cli.threads)?;
    let ctx = RunContext::new(&cfg, &raw, cli.seed, cli.out.as_deref(), &exec);

    let status = match cli.command {
        Command::Verify => run_verify(&cfg, &ctx),
        Command::DeltaP => run_delta_p(&cfg, &ctx),
        Command::Converge => run_converge(&cfg, &ctx),
        Command::Sample => run_sample(&cfg, &ctx),
    };
    match status {
        Ok(code) => Ok(code),
        Err(e) if e.is::<bandpath_cli::runner::ConfigError>() => Err(e),
        Err(e) => {
            eprintln!("run failed: {e:#}");
            Ok(1)
        }
    }
}
