//! `pbm`: runs the photonic Bayesian machine experiments from the command line.
//!
//! Exit codes: 0 success, 1 invariant or test failure, 2 usage error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod bench;
mod commands;
mod config;
mod selftest;

use config::{output_dir, write_json, Common, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Invariant(String),
    Usage(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invariant(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invariant(m) | CliError::Usage(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<pbm_core::Error> for CliError {
    fn from(e: pbm_core::Error) -> Self {
        use pbm_core::Error::*;
        let msg = e.to_string();
        match e {
            Io(_)
            | Json(_)
            | Csv(_)
            | BadMagic { .. }
            | Truncated { .. }
            | UnsupportedDtype(_)
            | UnsupportedLayout(_)
            | MalformedHeader(_) => CliError::Io(msg),
            InvalidArgument(_) | Shape { .. } | LabelOutOfRange { .. } => CliError::Usage(msg),
            _ => CliError::Invariant(msg),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Surrogate,
    Photonic,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Surrogate => "surrogate",
            Mode::Photonic => "photonic",
        }
    }
}

#[derive(Parser)]
#[command(name = "pbm", version, about = "Photonic Bayesian machine simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs the fast invariant suites.
    Selftest,
    /// Programs random kernels and measures the calibration error.
    Calibrate(commands::CalibrateArgs),
    /// Trains the hybrid Bayesian network with stochastic variational inference.
    Train(commands::TrainArgs),
    /// Scores a checkpoint on ID, OOD and ambiguous test sets.
    Eval(commands::EvalArgs),
    /// Reports modeled and measured convolution rates as JSON.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2.0)]
        seconds: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn selftest() -> Result<(), CliError> {
    let results = selftest::run(&selftest::Kernels::default());
    for r in &results {
        println!(
            "{} {} ({:.1} s): {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "failed suites: {}",
            failed.join(", ")
        )))
    }
}

fn bench(common: Common, seconds: f64, out: Option<PathBuf>) -> Result<(), CliError> {
    if !(seconds >= 0.0 && seconds.is_finite()) {
        return Err(CliError::Usage(format!(
            "--seconds must be non-negative, got {seconds}"
        )));
    }
    let mut cfg = RunConfig::resolve(&common, "bench")?;
    cfg.note("seconds", seconds);
    let report = bench::run(&cfg.photonic, seconds, cfg.seed)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
    println!("{text}");
    if let Some(dir) = out {
        let dir = output_dir(&dir)?;
        cfg.archive(&dir)?;
        write_json(&dir.join("bench.json"), &report)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Selftest => selftest(),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench {
            common,
            seconds,
            out,
        } => bench(common, seconds, out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
