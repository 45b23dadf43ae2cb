//! Score-level federations for comparing aggregation rules.
//!
//! Each agent has an analytic calibration score law and an analytic test
//! score law, so per-agent coverage of any threshold is exact. Rounds still
//! run through the federation simulator.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::calibration::{AgentId, ScoreSample};
use crate::error::{Error, Result};
use crate::evaluation::median;
use crate::federation::{run_round_simulated, AgentCalibration, CalibrationRoundConfig};
use crate::models::Strength;
use crate::rng::seeded;
use crate::theory::AnalyticDistribution;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreAgent {
    pub strength: Strength,
    pub calibration: AnalyticDistribution,
    pub test: AnalyticDistribution,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreScenario {
    pub agents: Vec<ScoreAgent>,
    pub alpha: f64,
}

impl ScoreScenario {
    /// Three strong agents with 1000 representative calibration scores and
    /// three weak agents with 100 scores of higher spread, whose local
    /// calibration under-samples hard examples: calibration scores sit
    /// `weak_calibration_shift` below the test scores.
    pub fn weak_agents(weak_calibration_shift: f64) -> Self {
        let strong = ScoreAgent {
            strength: Strength::Strong,
            calibration: AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.0 },
            test: AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.0 },
            n: 1000,
        };
        let weak = ScoreAgent {
            strength: Strength::Weak,
            calibration: AnalyticDistribution::Gaussian { mu: -weak_calibration_shift, sigma: 1.6 },
            test: AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.6 },
            n: 100,
        };
        ScoreScenario {
            agents: vec![strong.clone(), strong.clone(), strong, weak.clone(), weak.clone(), weak],
            alpha: 0.05,
        }
    }

    pub fn weak_agent_ids(&self) -> Vec<AgentId> {
        self.agents.iter().enumerate().filter(|(_, a)| a.strength == Strength::Weak).map(|(k, _)| k).collect()
    }

    /// Exact per-agent coverage of one round.
    pub fn coverage(&self, method: AggregationMethod, seed: u64) -> Result<Vec<f64>> {
        if self.agents.is_empty() {
            return Err(Error::validation("scenario has no agents"));
        }
        let participants = self
            .agents
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let mut rng = seeded(seed, k as u64);
                let sample = ScoreSample::new((0..a.n).map(|_| a.calibration.sample(&mut rng)).collect())?;
                Ok(AgentCalibration { agent_id: k, sample })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = CalibrationRoundConfig::new(self.alpha, method, self.agents.len(), format!("scores-{seed}"))?;
        let round = run_round_simulated(&participants, &cfg)?;
        Ok(round
            .received
            .iter()
            .map(|(k, t)| t.q_hat.as_finite().map_or(1.0, |q| self.agents[*k].test.cdf(q)))
            .collect())
    }

    /// Per-agent median coverage over `seeds`, per method.
    pub fn median_coverage(
        &self,
        methods: &[AggregationMethod],
        seeds: &[u64],
    ) -> Result<BTreeMap<AggregationMethod, Vec<f64>>> {
        methods
            .iter()
            .map(|&method| {
                let runs = seeds.par_iter().map(|&s| self.coverage(method, s)).collect::<Result<Vec<_>>>()?;
                let medians =
                    (0..self.agents.len()).map(|k| median(&runs.iter().map(|r| r[k]).collect::<Vec<_>>())).collect();
                Ok((method, medians))
            })
            .collect()
    }
}
