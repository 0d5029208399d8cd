//! `wantscope`: simulate a monitored BitSwap network, then unify, analyse
//! and attack the resulting traces.
//!
//! Exit status is 0 on success, 1 on internal errors and 2 on bad input.

mod analyze;
mod estimate;
mod manifest;
mod probe;
mod simulate;
mod unify;
mod util;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "wantscope", version, about = "Passive want-list monitoring toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulator; writes per-monitor traces and ground truth.
    Simulate(simulate::Args),
    /// Merge per-monitor traces and flag duplicates and re-broadcasts.
    Unify(unify::Args),
    /// Share, popularity, power-law and rate reports over a trace.
    Analyze(analyze::Args),
    /// Network-size and coverage estimates.
    Estimate(estimate::Args),
    /// Find the overlay nodes behind every gateway of a simulation.
    ProbeGateways(probe::GatewayArgs),
    /// Who asked for a CID.
    Idw(probe::IdwArgs),
    /// What a node asked for.
    Tnw(probe::TnwArgs),
    /// Whether a node holds a CID, by asking it.
    Tpi(probe::TpiArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate::cmd(a),
        Command::Unify(a) => unify::cmd(a),
        Command::Analyze(a) => analyze::cmd(a),
        Command::Estimate(a) => estimate::cmd(a),
        Command::ProbeGateways(a) => probe::cmd_gateways(a),
        Command::Idw(a) => probe::cmd_idw(a),
        Command::Tnw(a) => probe::cmd_tnw(a),
        Command::Tpi(a) => probe::cmd_tpi(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(util::exit_code(&e))
        }
    }
}
