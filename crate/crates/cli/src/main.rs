//! `degnse`: experiment driver for the degenerate-noise Navier–Stokes laboratory.
//!
//! Exit codes: 0 success, 1 I/O, 2 invalid configuration, 3 numerical failure.

mod artifact;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::artifact::{ArtifactWriter, Stamp, GIT_DESCRIBE};
use crate::config::ExperimentConfig;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical { stage: String, message: String },
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical { .. } => 3,
        }
    }

    pub fn numerical(stage: &str, message: impl Into<String>) -> Self {
        CliError::Numerical { stage: stage.to_string(), message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "invalid configuration: {m}"),
            CliError::Numerical { stage, message } => write!(f, "numerical failure in {stage}: {message}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

/// Parameter errors from the core trace back to the configuration.
impl From<degnse_core::Error> for CliError {
    fn from(e: degnse_core::Error) -> Self {
        match e {
            degnse_core::Error::Parameter(m) => CliError::Config(m),
            other => CliError::numerical("core", other.to_string()),
        }
    }
}

/// Tags core failures with the stage that raised them.
pub fn at(stage: &'static str) -> impl Fn(degnse_core::Error) -> CliError {
    move |e| match CliError::from(e) {
        CliError::Numerical { message, .. } => CliError::numerical(stage, message),
        other => other,
    }
}

#[derive(Debug, Parser)]
#[command(name = "degnse", version, about = "Spectral Galerkin laboratory for degenerately forced 3D Navier-Stokes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted override such as `control.eps=0.1`; applied in order, after the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "degnse-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Trajectories of the cutoff dynamics and exit-time statistics.
    Simulate,
    /// Cutoff and plain dynamics on shared noise, compared up to the exit time.
    Coupled,
    /// Jacobian flows, the low-mode Malliavin matrix and the law of its smallest eigenvalue.
    Malliavin,
    /// Pair certificates, minimal bracket level and spanning ranks.
    Hormander,
    /// Plans a steering control and replays it.
    Control,
    /// Desk-scale run of the whole property suite.
    VerifyAll,
    /// Prints the resolved configuration and its hash.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Coupled => "coupled",
            Command::Malliavin => "malliavin",
            Command::Hormander => "hormander",
            Command::Control => "control",
            Command::VerifyAll => "verify-all",
            Command::Config => "config",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &cli.set, cli.seed)?;
    if let Command::Config = cli.command {
        println!("# config_hash={}\n{}", cfg.hash(), cfg.canonical());
        return Ok(());
    }
    let stamp = Stamp {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        git_describe: GIT_DESCRIBE.to_string(),
        subcommand: cli.command.name().to_string(),
    };
    let mut out = ArtifactWriter::new(&cli.out, stamp)?;
    degnse_core::parallel::with_workers(cli.workers, || match cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut out),
        Command::Coupled => commands::coupled(&cfg, &mut out),
        Command::Malliavin => commands::malliavin(&cfg, &mut out),
        Command::Hormander => commands::hormander(&cfg, &mut out),
        Command::Control => commands::control(&cfg, &mut out),
        Command::VerifyAll => commands::verify_all(&cfg, &mut out),
        Command::Config => unreachable!(),
    })?;
    for p in out.written() {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("degnse {}: {e}", cli.command.name());
            ExitCode::from(e.exit_code())
        }
    }
}
