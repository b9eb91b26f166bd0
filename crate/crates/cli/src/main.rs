//! `magscan`: simulate, demodulate, detect and calibrate field-scanned CPT
//! resonances, and serve a virtual instrument.
//!
//! Exit codes: 0 ok, 2 usage or configuration, 3 I/O, 4 connection,
//! 5 protocol, 6 calibration failed, 7 data or schema.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod exit;
mod simulate;
mod svg;

use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use magscan::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
    Z,
}

impl AxisArg {
    pub fn axis(self) -> Axis {
        match self {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
            AxisArg::Z => Axis::Z,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "magscan", version, about = "CPT magnetometer simulation and coil calibration")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Synthesize and demodulate scans; write trace CSVs, SVGs and a manifest.
    Simulate(simulate::SimulateArgs),
    /// Demodulate a raw time series with one lock-in.
    Demod(commands::DemodArgs),
    /// Find dispersive resonances in a trace CSV; prints JSON lines.
    Detect(commands::DetectArgs),
    /// Calibrate the coils of a virtual or remote instrument.
    Calibrate(commands::CalibrateArgs),
    /// Serve a virtual instrument over the line protocol.
    Serve(commands::ServeArgs),
    /// Serve recorded trace CSVs over the line protocol.
    Replay(commands::ReplayArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Simulate(a) => simulate::run(a),
        Cmd::Demod(a) => commands::demod(a),
        Cmd::Detect(a) => commands::detect(a),
        Cmd::Calibrate(a) => commands::calibrate(a),
        Cmd::Serve(a) => commands::serve_cmd(a),
        Cmd::Replay(a) => commands::replay(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
