use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lld_core::cli::{explore_election, run_corpus, run_scenario, schema, Mutation, Outcome, RunOptions, Scenario};
use lld_core::explorer::{ElectionConfig, Limits};
use lld_core::sim::ScheduleTrace;

/// Scenario runner and schedule explorer for trusted leases and local
/// leader election.
#[derive(Parser)]
#[command(name = "lld", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario file. Prints the JSON report on stdout and a table
    /// on stderr; exits nonzero unless the scenario met its expectation.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        limit: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Run every scenario in a directory.
    Corpus { dir: PathBuf },
    /// Exhaustively explore the local leader election.
    Explore {
        #[arg(long, default_value_t = 1)]
        epsilon: u64,
        #[arg(long, default_value_t = 5)]
        period: u64,
        #[arg(long, default_value_t = 2)]
        max_instances: usize,
        #[arg(long, default_value_t = 100_000)]
        depth: usize,
        /// Rule override, for example `wait=P+2eps`.
        #[arg(long)]
        mutate: Option<String>,
        /// Adversary pauses per path (unlimited when omitted).
        #[arg(long)]
        pause_budget: Option<u8>,
        #[arg(long)]
        max_states: Option<usize>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Re-run a scenario and check it reproduces an exported trace.
    Replay {
        file: PathBuf,
        trace: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        limit: Option<u64>,
    },
    /// Print the scenario file JSON schema.
    Schema,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn write_trace(path: &Path, trace: &ScheduleTrace) -> Result<(), String> {
    std::fs::write(path, trace.export()).map_err(|e| format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            file,
            seed,
            limit,
            trace_out,
        } => {
            let scenario = match Scenario::load(&file) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let mut out = match run_scenario(&scenario, &RunOptions { seed, limit }) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            if let Some(path) = trace_out {
                if let Err(e) = write_trace(&path, &out.trace) {
                    return fail(e);
                }
                out.report.trace.path = Some(path.display().to_string());
            }
            println!("{}", out.report.to_json());
            eprint!("{}", out.report.table());
            if out.report.met_expectation {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Command::Corpus { dir } => match run_corpus(&dir) {
            Ok(report) => {
                println!("{}", report.to_json());
                eprint!("{}", report.table());
                if report.all_passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::FAILURE
                }
            }
            Err(e) => fail(e),
        },
        Command::Explore {
            epsilon,
            period,
            max_instances,
            depth,
            mutate,
            pause_budget,
            max_states,
            trace_out,
        } => {
            if epsilon == 0 || period == 0 || max_instances == 0 || depth == 0 {
                return fail("epsilon, period, max-instances and depth must be positive");
            }
            let mut config = ElectionConfig::new(epsilon, period, max_instances).with_pause_budget(pause_budget);
            if let Some(m) = mutate {
                match Mutation::parse(&m, epsilon, period) {
                    Ok(Mutation::Wait(w)) => config = config.with_wait(w),
                    Err(e) => return fail(format!("--mutate: {e}")),
                }
            }
            let mut limits = Limits {
                depth_bound: depth,
                ..Limits::default()
            };
            if let Some(m) = max_states {
                limits.max_states = m;
            }
            let result = explore_election(config, limits);
            if let Some(path) = trace_out {
                if let Err(e) = write_trace(&path, &result.trace) {
                    return fail(e);
                }
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&result.report).expect("reports serialize")
            );
            let r = &result.report;
            eprintln!(
                "{}: {} states, {} transitions, max depth {}",
                r.verdict, r.states_explored, r.transitions, r.max_depth
            );
            match result.outcome {
                Outcome::Pass => ExitCode::SUCCESS,
                Outcome::Violation => ExitCode::FAILURE,
                Outcome::Inconclusive => ExitCode::from(3),
            }
        }
        Command::Replay {
            file,
            trace,
            seed,
            limit,
        } => {
            let scenario = match Scenario::load(&file) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let recorded = match std::fs::read_to_string(&trace)
                .map_err(|e| e.to_string())
                .and_then(|t| ScheduleTrace::parse(&t).map_err(|e| e.to_string()))
            {
                Ok(t) => t,
                Err(e) => return fail(format!("{}: {e}", trace.display())),
            };
            let out = match run_scenario(&scenario, &RunOptions { seed, limit }) {
                Ok(o) => o,
                Err(e) => return fail(e),
            };
            match recorded.verify_replay(&out.trace) {
                Ok(()) => {
                    eprintln!("replay reproduces all {} digests", recorded.len());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("replay diverged: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Schema => {
            println!("{}", schema());
            ExitCode::SUCCESS
        }
    }
}
