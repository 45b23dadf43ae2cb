//! `fedwq`: experiments, networked calibration rounds and bound audits.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedwq::theory::AuditKind;
use fedwq::AggregationMethod;

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "fedwq", version, about = "One-shot federated conformal calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Runs every seed and method of a config and writes CSV and JSON results.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coordinates one networked calibration round.
    Serve(ServeArgs),
    /// Takes part in a networked round with scores loaded from a JSON file.
    Agent(AgentArgs),
    /// Audits the coverage bounds; exits 1 if any verified case fails.
    Audit {
        #[arg(value_parser = parse_audit)]
        which: AuditKind,
        /// Randomized cases for the stability audit.
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Experiment config used as the base of the trend audit.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `audit.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recomputes `summary.csv` from an existing `coverage.csv`.
    Report {
        /// Results directory; defaults to the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Round parameters; unset values come from `--config`, then from defaults.
#[derive(Debug, Args)]
struct RoundArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed whose round id is used when `--round-id` is absent.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    round_id: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<AggregationMethod>,
    /// Number of agents the round waits for.
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    timeout_s: f64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    round: RoundArgs,
    #[arg(long, env = "FEDWQ_BIND", default_value = "127.0.0.1:7878")]
    bind: String,
    /// Directory for `audit.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AgentArgs {
    #[command(flatten)]
    round: RoundArgs,
    #[arg(long)]
    connect: String,
    /// JSON file `{"agent_id": k, "scores": [...]}`.
    #[arg(long)]
    scores: PathBuf,
    /// Overrides the id stored in the score file.
    #[arg(long)]
    agent_id: Option<usize>,
}

fn parse_audit(s: &str) -> Result<AuditKind, String> {
    s.parse().map_err(|e: fedwq::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<AggregationMethod, String> {
    s.parse().map_err(|e: fedwq::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => commands::run(&config, seed, out),
        Command::Serve(args) => commands::serve(&args.round, &args.bind, args.out.as_deref()),
        Command::Agent(args) => commands::agent(&args.round, &args.connect, &args.scores, args.agent_id),
        Command::Audit { which, cases, seed, config, out } => {
            commands::audit(which, cases, seed, config.as_deref(), out.as_deref())
        }
        Command::Report { out, config } => commands::report(out, config.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CliError::Usage(_) => ExitCode::from(2),
                CliError::Runtime(_) | CliError::Failed(_) => ExitCode::from(1),
            }
        }
    }
}
