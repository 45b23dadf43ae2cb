use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedwq::evaluation::median;
use fedwq::experiment::{
    read_coverage_csv, read_score_file, round_id, run_experiment_full, summarize, write_experiment, write_summary_csv,
    ExperimentConfig, COVERAGE_CSV, SUMMARY_CSV,
};
use fedwq::federation::hexfloat::to_hex;
use fedwq::federation::{run_agent, serve as serve_round, write_audit_log, CalibrationRoundConfig};
use fedwq::theory::{run_audits, AuditKind, AuditOptions};
use fedwq::{AgentId, AggregatedThreshold, AggregationOutcome, Error, ScoreSample, Threshold};
use log::info;
use serde::Serialize;

use crate::RoundArgs;

pub const AUDIT_JSONL: &str = "audit.jsonl";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit 2.
    Usage(String),
    /// Pipeline, transport or protocol failure; exit 1.
    Runtime(Error),
    /// The command ran but its check did not pass; exit 1.
    Failed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Runtime(err) => write!(f, "{err}"),
            CliError::Failed(msg) => write!(f, "{msg}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        CliError::Runtime(err)
    }
}

impl From<std::io::Error> for CliError {
    fn from(err: std::io::Error) -> Self {
        CliError::Runtime(err.into())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult {
    let mut cfg = load_config(Some(config))?;
    if let Some(seed) = seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let output = run_experiment_full(&cfg)?;
    write_experiment(&cfg.output_dir, &cfg, &output)?;
    info!("results written to {}", cfg.output_dir.display());
    let mut stdout = std::io::stdout().lock();
    for method in &cfg.methods {
        let reports: Vec<_> = output.reports.iter().filter(|r| r.method == *method).collect();
        let cov: Vec<f64> = reports.iter().map(|r| r.global_coverage).collect();
        let eff: Vec<f64> = reports.iter().map(|r| r.global_efficiency).collect();
        writeln!(
            stdout,
            "{method}: median coverage {:.4}, median efficiency {:.4} over {} seeds",
            median(&cov),
            median(&eff),
            reports.len()
        )?;
    }
    Ok(())
}

fn round_config(args: &RoundArgs) -> CliResult<CalibrationRoundConfig> {
    let base = load_config(args.config.as_deref())?;
    let alpha = args.alpha.unwrap_or(base.alpha);
    let method = match args.method {
        Some(m) => m,
        None => *base.methods.first().ok_or_else(|| CliError::Usage("config lists no methods".into()))?,
    };
    let agents = args.agents.unwrap_or(base.agents);
    let seed = args.seed.or_else(|| base.seeds.first().copied()).unwrap_or(0);
    let id = args.round_id.clone().unwrap_or_else(|| round_id(seed, method));
    if !(args.timeout_s.is_finite() && args.timeout_s > 0.0) {
        return Err(CliError::Usage(format!("--timeout-s must be positive, got {}", args.timeout_s)));
    }
    let cfg = CalibrationRoundConfig::new(alpha, method, agents, id).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg.with_timeout(Duration::from_secs_f64(args.timeout_s)))
}

/// One printed threshold; `agent_id` is absent for a global broadcast.
#[derive(Serialize)]
struct ThresholdLine<'a> {
    round_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    agent_id: Option<AgentId>,
    method: &'static str,
    q_hat: Threshold,
    q_hat_hex: String,
    total_n: usize,
    agent_count: usize,
}

fn print_threshold(round_id: &str, agent_id: Option<AgentId>, t: &AggregatedThreshold) -> CliResult {
    let line = ThresholdLine {
        round_id,
        agent_id,
        method: t.method.as_str(),
        q_hat: t.q_hat,
        q_hat_hex: to_hex(t.q_hat.value()),
        total_n: t.total_n,
        agent_count: t.agent_count,
    };
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer(&mut stdout, &line).map_err(Error::from)?;
    writeln!(stdout)?;
    Ok(())
}

pub fn serve(args: &RoundArgs, bind: &str, out: Option<&Path>) -> CliResult {
    let cfg = round_config(args)?;
    let server = serve_round(bind, &cfg)?;
    {
        // Agents and scripts read the bound address from this line.
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "listening {}", server.local_addr())?;
        stdout.flush()?;
    }
    let round = server.wait()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_audit_log(&dir.join(AUDIT_JSONL), &round.audit)?;
    }
    match &round.outcome {
        AggregationOutcome::Global(t) => print_threshold(&cfg.round_id, None, t),
        AggregationOutcome::PerAgent(list) => {
            list.iter().try_for_each(|(agent, t)| print_threshold(&cfg.round_id, Some(*agent), t))
        }
    }
}

pub fn agent(args: &RoundArgs, connect: &str, scores: &Path, agent_id: Option<AgentId>) -> CliResult {
    let cfg = round_config(args)?;
    let file = read_score_file(scores)
        .map_err(|e| CliError::Usage(format!("cannot read scores {}: {e}", scores.display())))?;
    let sample = ScoreSample::new(file.scores).map_err(|e| CliError::Usage(e.to_string()))?;
    let id = agent_id.unwrap_or(file.agent_id);
    let threshold = run_agent(connect, id, &sample, &cfg)?;
    print_threshold(&cfg.round_id, Some(id), &threshold)
}

pub fn audit(which: AuditKind, cases: usize, seed: u64, config: Option<&Path>, out: Option<&Path>) -> CliResult {
    let opts = AuditOptions { cases, seed, trend_base: load_config(config)?, ..AuditOptions::default() };
    let rows = run_audits(which, &opts)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut text = Vec::new();
        for row in &rows {
            serde_json::to_writer(&mut text, row).map_err(Error::from)?;
            text.push(b'\n');
        }
        fs::write(dir.join(AUDIT_JSONL), text)?;
    }
    // (checked, skipped, violations) per audit.
    let mut tally: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for row in &rows {
        let entry = tally.entry(row.audit.as_str()).or_default();
        if row.skipped {
            entry.1 += 1;
        } else {
            entry.0 += 1;
            entry.2 += usize::from(!row.holds);
        }
    }
    let mut stdout = std::io::stdout().lock();
    for (name, (checked, skipped, violations)) in &tally {
        writeln!(stdout, "{name}: {checked} checked, {skipped} skipped, {violations} violations")?;
    }
    let total: usize = tally.values().map(|t| t.2).sum();
    if total > 0 {
        return Err(CliError::Failed(format!("{total} audit cases violate their bound")));
    }
    Ok(())
}

pub fn report(out: Option<PathBuf>, config: Option<&Path>) -> CliResult {
    let dir = match (out, config) {
        (Some(dir), _) => dir,
        (None, Some(_)) => load_config(config)?.output_dir,
        (None, None) => return Err(CliError::Usage("report needs --out or --config".into())),
    };
    let rows = read_coverage_csv(&dir.join(COVERAGE_CSV))?;
    let summary = summarize(&rows)?;
    write_summary_csv(&dir.join(SUMMARY_CSV), &summary)?;
    let mut stdout = std::io::stdout().lock();
    for s in &summary {
        writeln!(
            stdout,
            "{} {} {} {}: median {:.4} [{:.4}, {:.4}] over {} seeds",
            s.dataset, s.method, s.agent, s.metric, s.median, s.ci_lo, s.ci_hi, s.n_seeds
        )?;
    }
    Ok(())
}
