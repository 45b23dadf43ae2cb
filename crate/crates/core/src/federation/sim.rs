//! In-process round. Messages still pass through the wire codec so the
//! simulator sees exactly the bytes a networked server would.

use rayon::prelude::*;

use super::wire::{self, ThresholdMessage, WireMessage};
use super::{agent_messages, AuditRecord, CalibrationRoundConfig, Direction, RoundCollector};
use crate::aggregation::{AggregatedThreshold, AggregationOutcome};
use crate::calibration::{AgentId, ScoreSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AgentCalibration {
    pub agent_id: AgentId,
    pub sample: ScoreSample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedRound {
    pub outcome: AggregationOutcome,
    /// Threshold each agent decoded from its downstream message, by agent id.
    pub received: Vec<(AgentId, AggregatedThreshold)>,
    pub audit: Vec<AuditRecord>,
    /// Raw upstream lines in agent order.
    pub upstream: Vec<String>,
}

impl SimulatedRound {
    /// The broadcast threshold of a global method.
    pub fn q_hat(&self) -> Option<AggregatedThreshold> {
        self.outcome.global().copied()
    }
}

pub fn run_round_simulated(agents: &[AgentCalibration], cfg: &CalibrationRoundConfig) -> Result<SimulatedRound> {
    if agents.is_empty() {
        return Err(Error::validation("a round needs at least one agent"));
    }
    if agents.len() != cfg.agent_count {
        return Err(Error::validation(format!("round expects {} agents, got {}", cfg.agent_count, agents.len())));
    }
    let encoded: Vec<(AgentId, Vec<(&'static str, String)>)> = agents
        .par_iter()
        .map(|a| {
            let lines =
                agent_messages(a.agent_id, &a.sample, cfg).iter().map(|m| (m.type_name(), wire::encode(m))).collect();
            (a.agent_id, lines)
        })
        .collect();

    let mut collector = RoundCollector::new(cfg.clone());
    let mut audit = Vec::new();
    let mut upstream = Vec::new();
    for (agent_id, lines) in encoded {
        for (kind, line) in lines {
            audit.push(AuditRecord::new(cfg, Direction::Upstream, Some(agent_id), kind, line.len()));
            collector.accept(wire::decode(&line)?)?;
            upstream.push(line);
        }
    }
    let outcome = collector.finish()?;

    let mut received = Vec::with_capacity(agents.len());
    for a in agents {
        let threshold = outcome.for_agent(a.agent_id).expect("a complete round covers every contributing agent");
        let line = wire::encode(&WireMessage::Threshold(ThresholdMessage::new(&cfg.round_id, cfg.alpha(), threshold)));
        audit.push(AuditRecord::new(cfg, Direction::Downstream, Some(a.agent_id), "threshold", line.len()));
        match wire::decode(&line)? {
            WireMessage::Threshold(m) => received.push((a.agent_id, m.aggregated())),
            other => unreachable!("encoded a threshold, decoded {}", other.type_name()),
        }
    }
    Ok(SimulatedRound { outcome, received, audit, upstream })
}
