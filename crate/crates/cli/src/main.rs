//! `crowd`: file-based front end for crowd counting, motion and pressure
//! analysis.

use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod analysis;
mod geo;
mod model;
mod prep;

/// Exit code for invalid arguments or data.
const EXIT_VALIDATION: u8 = 1;
/// Exit code for filesystem failures.
const EXIT_IO: u8 = 2;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Io(m) => f.write_str(m),
        }
    }
}

impl From<crowd_core::Error> for CliError {
    fn from(e: crowd_core::Error) -> Self {
        if e.is_io() {
            CliError::Io(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(format!("I/O error: {e}"))
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

pub fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Attaches the offending path to I/O errors.
pub fn with_path<T>(r: crowd_core::Result<T>, path: &std::path::Path) -> CliResult<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
    })
}

#[derive(Parser, Debug)]
#[command(name = "crowd", version, about = "Crowd density, motion and pressure analysis")]
struct Cli {
    /// Worker threads (0 = one per core)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes, moving sequences or planted training sets
    Synth(prep::SynthArgs),
    /// Compute, quantize and stack per-pixel features
    Features(prep::FeaturesArgs),
    /// Train a density model from features and annotations
    Learn(model::LearnArgs),
    /// Apply a model to feature maps: density maps and counts
    Estimate(model::EstimateArgs),
    /// TV-L1 optical flow over an ordered frame list
    Flow(analysis::FlowArgs),
    /// Rectify density or motion into a world grid
    Georef(geo::GeorefArgs),
    /// Pressure maps from world-grid density and velocities
    Pressure(geo::PressureArgs),
    /// Count error report and temporal smoothness
    Eval(model::EvalArgs),
    /// Render a grid as an 8-bit PGM heatmap
    Render(analysis::RenderArgs),
}

fn run(cli: Cli) -> CliResult {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| invalid(format!("cannot start {} threads: {e}", cli.threads)))?;
    }
    match cli.command {
        Command::Synth(a) => prep::synth(a),
        Command::Features(a) => prep::features(a),
        Command::Learn(a) => model::learn(a),
        Command::Estimate(a) => model::estimate(a),
        Command::Flow(a) => analysis::flow(a),
        Command::Georef(a) => geo::georef(a),
        Command::Pressure(a) => geo::pressure(a),
        Command::Eval(a) => model::eval(a),
        Command::Render(a) => analysis::render(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_VALIDATION),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => EXIT_VALIDATION,
                CliError::Io(_) => EXIT_IO,
            })
        }
    }
}
