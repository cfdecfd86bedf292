//! `ccrp`: run accounting scenarios and inspect their evidence.
//!
//! Exit codes: 0 on success (for `run`, every interval agreed), 2 when a run
//! left intervals non-agreed, 1 on any error or failed verification.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use ccrp_core::output;
use ccrp_core::simulator::{self, Scenario};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "ccrp",
    version,
    about = "Bilateral storage accounting with online conflict resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write logs, evidence and reports to a directory.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the comparator tolerance in bytes.
        #[arg(long)]
        tolerance: Option<u64>,
        /// Override the negotiation round budget.
        #[arg(long)]
        max_rounds: Option<u32>,
    },
    /// Re-check every signature and re-derive every record from the meter logs.
    Verify { dir: PathBuf },
    /// Print the negotiation transcript of one interval.
    Replay { dir: PathBuf, interval: u64 },
    /// Print the summary table of a run.
    Report { dir: PathBuf },
}

fn run(
    path: PathBuf,
    out: PathBuf,
    seed: Option<u64>,
    tolerance: Option<u64>,
    max_rounds: Option<u32>,
) -> Result<ExitCode, String> {
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut scenario = Scenario::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    if let Some(tolerance) = tolerance {
        scenario.tolerance = tolerance;
    }
    if let Some(max_rounds) = max_rounds {
        scenario.max_rounds = max_rounds;
    }
    scenario.validate().map_err(|e| e.to_string())?;
    let result = simulator::run(&scenario).map_err(|e| e.to_string())?;
    output::write_run(&result, &out).map_err(|e| e.to_string())?;
    print!("{}", result.report.table());
    Ok(if result.report.all_agreed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            tolerance,
            max_rounds,
        } => run(scenario, out, seed, tolerance, max_rounds),
        Command::Verify { dir } => output::verify_dir(&dir)
            .map_err(|e| e.to_string())
            .map(|s| {
                println!(
                    "ok: {} agreed, {} non-agreed, {} tokens verified",
                    s.agreed, s.non_agreed, s.envelopes
                );
                ExitCode::SUCCESS
            }),
        Command::Replay { dir, interval } => output::replay(&dir, interval)
            .map_err(|e| e.to_string())
            .map(|t| {
                print!("{t}");
                ExitCode::SUCCESS
            }),
        Command::Report { dir } => output::report(&dir).map_err(|e| e.to_string()).map(|t| {
            print!("{t}");
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
