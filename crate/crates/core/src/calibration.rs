//! Agent-local split conformal calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threshold::Threshold;

/// Identifier of an agent within a federation.
pub type AgentId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    alpha: f64,
}

impl CalibrationConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation(format!("alpha {alpha} outside (0, 1)")));
        }
        Ok(CalibrationConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

/// An agent's calibration scores. Never empty, never non-finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScoreSample(Vec<f64>);

impl ScoreSample {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::validation("score sample is empty"));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::validation(format!("score {s} is not finite")));
        }
        Ok(ScoreSample(scores))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ScoreSample {
    type Error = Error;

    fn try_from(scores: Vec<f64>) -> Result<Self> {
        ScoreSample::new(scores)
    }
}

impl From<ScoreSample> for Vec<f64> {
    fn from(sample: ScoreSample) -> Self {
        sample.0
    }
}

/// `(q_k, n_k)`: the only thing an agent discloses in a one-shot round.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalQuantileSummary {
    pub agent_id: AgentId,
    pub q: Threshold,
    pub n: usize,
}

impl LocalQuantileSummary {
    pub fn new(agent_id: AgentId, q: Threshold, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::validation(format!("agent {agent_id} reported n = 0 calibration samples")));
        }
        Ok(LocalQuantileSummary { agent_id, q, n })
    }
}

/// Rank of the conformal order statistic for a sample of size `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantileIndex {
    /// `ceil((n + 1)(1 − alpha))`, 1-indexed.
    pub rank: usize,
    pub n: usize,
}

impl QuantileIndex {
    /// True when the rank overflows the sample and the threshold is the sentinel.
    pub fn exceeds_sample(&self) -> bool {
        self.rank > self.n
    }

    /// Corrected level `rank / n`, when the rank fits inside the sample.
    pub fn tau(&self) -> Option<f64> {
        (!self.exceeds_sample()).then(|| self.rank as f64 / self.n as f64)
    }
}

/// Ceiling that ignores representation error in an exact product such as
/// `10 * 0.9`, which would otherwise round up by one.
pub(crate) fn conformal_ceil(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * x.abs().max(1.0) {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

pub fn empirical_quantile_index(n: usize, alpha: f64) -> QuantileIndex {
    let rank = conformal_ceil((n as f64 + 1.0) * (1.0 - alpha)).max(1);
    QuantileIndex { rank, n }
}

/// `k`-th smallest value (1-indexed) by selection; duplicates occupy
/// consecutive ranks.
pub(crate) fn order_statistic(values: &[f64], k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= values.len());
    let mut buf = values.to_vec();
    let (_, kth, _) = buf.select_nth_unstable_by(k - 1, f64::total_cmp);
    *kth
}

/// Split conformal threshold of one agent's scores.
pub fn local_threshold(agent_id: AgentId, sample: &ScoreSample, config: &CalibrationConfig) -> LocalQuantileSummary {
    let index = empirical_quantile_index(sample.len(), config.alpha());
    let q = if index.exceeds_sample() {
        Threshold::INFINITE
    } else {
        Threshold::finite(order_statistic(sample.scores(), index.rank)).expect("score samples hold only finite values")
    };
    LocalQuantileSummary { agent_id, q, n: sample.len() }
}
