//! One-shot calibration round: agents send `(q̂_k, n_k)`, the server
//! aggregates once and broadcasts `q̂`.
//!
//! The in-process simulator and the TCP server share [`RoundCollector`] and
//! the wire codec, so both paths apply identical validation and produce
//! bit-identical thresholds.

pub mod hexfloat;
pub mod net;
pub mod sim;
pub mod wire;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, AggregationInput, AggregationMethod, AggregationOutcome};
use crate::calibration::{local_threshold, AgentId, CalibrationConfig, LocalQuantileSummary, ScoreSample};
use crate::error::{Error, Result};
use wire::{ScoresMessage, SummaryMessage, WireMessage};

pub use net::{run_agent, serve, ServerHandle, ServerRound};
pub use sim::{run_round_simulated, AgentCalibration, SimulatedRound};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
/// Score values per `scores` line in the pooled baseline.
pub const SCORE_CHUNK: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRoundConfig {
    calibration: CalibrationConfig,
    pub method: AggregationMethod,
    pub agent_count: usize,
    pub round_id: String,
    /// Networked mode only.
    pub timeout: Duration,
}

impl CalibrationRoundConfig {
    pub fn new(alpha: f64, method: AggregationMethod, agent_count: usize, round_id: impl Into<String>) -> Result<Self> {
        let round_id = round_id.into();
        if agent_count == 0 {
            return Err(Error::validation("a round needs at least one agent"));
        }
        if round_id.is_empty() {
            return Err(Error::validation("round_id must be non-empty"));
        }
        Ok(CalibrationRoundConfig {
            calibration: CalibrationConfig::new(alpha)?,
            method,
            agent_count,
            round_id,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.calibration.alpha()
    }

    pub fn calibration(&self) -> &CalibrationConfig {
        &self.calibration
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upstream,
    Downstream,
}

/// One line of the audit log: a single wire message as seen by the server.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub round_id: String,
    pub direction: Direction,
    pub agent_id: Option<AgentId>,
    pub message_type: String,
    pub bytes: usize,
    pub timestamp_ms: u64,
    /// False for traffic of a method that ships raw scores.
    pub one_shot: bool,
}

impl AuditRecord {
    pub(crate) fn new(
        cfg: &CalibrationRoundConfig,
        direction: Direction,
        agent_id: Option<AgentId>,
        message_type: &str,
        bytes: usize,
    ) -> Self {
        let timestamp_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        AuditRecord {
            round_id: cfg.round_id.clone(),
            direction,
            agent_id,
            message_type: message_type.to_string(),
            bytes,
            timestamp_ms,
            one_shot: cfg.method.is_one_shot(),
        }
    }
}

pub fn write_audit_log(path: &Path, records: &[AuditRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Upstream lines an agent sends for `cfg.method`.
pub fn agent_messages(agent_id: AgentId, sample: &ScoreSample, cfg: &CalibrationRoundConfig) -> Vec<WireMessage> {
    if cfg.method == AggregationMethod::PooledScores {
        let chunks: Vec<&[f64]> = sample.scores().chunks(SCORE_CHUNK).collect();
        let of = chunks.len();
        return chunks
            .into_iter()
            .enumerate()
            .map(|(chunk, values)| {
                WireMessage::Scores(ScoresMessage {
                    round_id: cfg.round_id.clone(),
                    agent_id,
                    chunk,
                    of,
                    values: values.to_vec(),
                })
            })
            .collect();
    }
    let summary = local_threshold(agent_id, sample, cfg.calibration());
    vec![WireMessage::Summary(SummaryMessage { round_id: cfg.round_id.clone(), agent_id, q: summary.q, n: summary.n })]
}

#[derive(Debug, Default)]
struct ChunkState {
    of: usize,
    received: BTreeMap<usize, Vec<f64>>,
}

impl ChunkState {
    fn is_complete(&self) -> bool {
        self.received.len() == self.of
    }
}

/// What an accepted message did to the round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Accepted {
    /// The agent's contribution is now complete.
    Contribution(AgentId),
    /// A score chunk arrived; more are expected.
    Partial(AgentId),
}

/// Server-side state of one round. Every check on an upstream message
/// lives here.
#[derive(Debug)]
pub(crate) struct RoundCollector {
    cfg: CalibrationRoundConfig,
    summaries: BTreeMap<AgentId, LocalQuantileSummary>,
    chunks: BTreeMap<AgentId, ChunkState>,
}

impl RoundCollector {
    pub(crate) fn new(cfg: CalibrationRoundConfig) -> Self {
        RoundCollector { cfg, summaries: BTreeMap::new(), chunks: BTreeMap::new() }
    }

    pub(crate) fn contributed(&self) -> usize {
        match self.cfg.method {
            AggregationMethod::PooledScores => self.chunks.values().filter(|c| c.is_complete()).count(),
            _ => self.summaries.len(),
        }
    }

    pub(crate) fn is_complete(&self) -> bool {
        self.contributed() == self.cfg.agent_count
    }

    fn duplicate(agent_id: AgentId) -> Error {
        Error::protocol("duplicate_agent", format!("agent {agent_id} already contributed to this round"))
    }

    pub(crate) fn accept(&mut self, message: WireMessage) -> Result<Accepted> {
        if message.round_id() != self.cfg.round_id {
            return Err(Error::protocol(
                "round_mismatch",
                format!("expected round {:?}, got {:?}", self.cfg.round_id, message.round_id()),
            ));
        }
        let pooled = self.cfg.method == AggregationMethod::PooledScores;
        match message {
            WireMessage::Summary(m) if !pooled => {
                if self.summaries.contains_key(&m.agent_id) {
                    return Err(Self::duplicate(m.agent_id));
                }
                if self.is_complete() {
                    return Err(Error::protocol("round_full", "all agents already reported"));
                }
                let summary = LocalQuantileSummary::new(m.agent_id, m.q, m.n)?;
                self.summaries.insert(m.agent_id, summary);
                Ok(Accepted::Contribution(m.agent_id))
            }
            WireMessage::Scores(m) if pooled => {
                let state = self.chunks.entry(m.agent_id).or_default();
                if state.of != 0 && state.is_complete() {
                    return Err(Self::duplicate(m.agent_id));
                }
                if m.of == 0 || m.chunk >= m.of || (state.of != 0 && state.of != m.of) {
                    return Err(Error::validation(format!("inconsistent chunk {}/{}", m.chunk, m.of)));
                }
                if m.values.is_empty() || m.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::validation("score chunks must hold finite values"));
                }
                if state.received.contains_key(&m.chunk) {
                    return Err(Error::protocol("duplicate_chunk", format!("chunk {} sent twice", m.chunk)));
                }
                state.of = m.of;
                state.received.insert(m.chunk, m.values);
                Ok(if state.is_complete() { Accepted::Contribution(m.agent_id) } else { Accepted::Partial(m.agent_id) })
            }
            other => Err(Error::protocol(
                "unexpected_message",
                format!("{} message is not valid upstream for {}", other.type_name(), self.cfg.method),
            )),
        }
    }

    /// Runs the single aggregation. Callers check `is_complete` first.
    pub(crate) fn finish(&self) -> Result<AggregationOutcome> {
        if !self.is_complete() {
            return Err(Error::PartialRound {
                received: self.contributed(),
                expected: self.cfg.agent_count,
                reason: "aggregation requested before all agents reported".into(),
            });
        }
        if self.cfg.method == AggregationMethod::PooledScores {
            let samples = self
                .chunks
                .values()
                .map(|c| ScoreSample::new(c.received.values().flatten().copied().collect()))
                .collect::<Result<Vec<_>>>()?;
            aggregate(AggregationInput::Samples(&samples), self.cfg.method, self.cfg.calibration())
        } else {
            let summaries: Vec<_> = self.summaries.values().copied().collect();
            aggregate(AggregationInput::Summaries(&summaries), self.cfg.method, self.cfg.calibration())
        }
    }
}
