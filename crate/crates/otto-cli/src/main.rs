//! Scenario runner: JSON configs in, deterministic artifacts out.
//!
//! `run` executes one scenario and writes results.csv, diagnostics.json and
//! manifest.json into the configured output directory; `suite` runs the
//! built-in invariant battery; `plotdata` reshapes a results.csv into
//! long-format series. Exit codes: 0 ok, 2 config, 3 numeric divergence,
//! 4 invariant failure.

mod artifacts;
mod config;
mod plotdata;
mod scenarios;
mod suite;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Failure classes map one-to-one onto exit codes. Errors raised while a
/// scenario is being assembled are config errors; errors raised by the
/// running simulation are numeric.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Numeric(String),
    Invariant(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Numeric(_) => 3,
            Failure::Invariant(_) => 4,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Failure::Config(m) => format!("config error: {m}"),
            Failure::Numeric(m) => format!("numeric failure: {m}"),
            Failure::Invariant(m) => format!("invariant failure: {m}"),
        }
    }
}

pub fn cfg(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

pub fn cfg_from(e: otto::Error) -> Failure {
    Failure::Config(e.to_string())
}

pub fn num_from(e: otto::Error) -> Failure {
    Failure::Numeric(e.to_string())
}

#[derive(Parser)]
#[command(name = "otto", version, about = "Measure-space diffusion scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario config; writes results.csv, diagnostics.json, manifest.json.
    Run { config: PathBuf },
    /// Run the built-in invariant battery.
    Suite,
    /// Reshape a results.csv into long-format (t, series, value) rows.
    Plotdata {
        input: PathBuf,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn setup_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("OTTO_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| cfg(format!("OTTO_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| cfg(format!("thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run { config } => {
            let raw = std::fs::read(&config)
                .map_err(|e| cfg(format!("cannot read {}: {e}", config.display())))?;
            let scenario = config::parse(&raw)?;
            scenarios::run(&scenario, &raw)
        }
        Cmd::Suite => suite::run_cli(),
        Cmd::Plotdata { input, out } => plotdata::emit(&input, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match setup_threads().and_then(|()| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.render());
            ExitCode::from(f.code())
        }
    }
}
