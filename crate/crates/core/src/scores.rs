//! Nonconformity scores: deterministic APS for classification and CQR for
//! regression, together with the prediction sets they induce.
//!
//! Both score families satisfy the set/score duality
//! `y ∈ C_t(x) ⇔ score(x, y) ≤ t`, which holds bit-exactly here because the
//! set constructors evaluate the same score routine they are dual to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threshold::Threshold;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// Softmax output of a classifier.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbabilityVector(Vec<f64>);

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::validation(format!("probability vector needs at least 2 classes, got {}", probs.len())));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::validation(format!("probability {p} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(Error::validation(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(ProbabilityVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Class indices ordered by descending probability, ties by ascending index.
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| self.0[b].total_cmp(&self.0[a]).then(a.cmp(&b)));
        order
    }

    /// APS score of every class, indexed by class.
    pub fn aps_scores(&self) -> Vec<f64> {
        let mut scores = vec![0.0; self.0.len()];
        let mut cumulative = 0.0;
        for class in self.ranking() {
            cumulative += self.0[class];
            scores[class] = cumulative.min(1.0);
        }
        scores
    }
}

/// Deterministic APS score: mass of all classes ranked at or before `label`.
pub fn aps_score(probs: &ProbabilityVector, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::Index { index: label, len: probs.len() });
    }
    Ok(probs.aps_scores()[label])
}

/// `{ y : aps_score(probs, y) ≤ threshold }`, in ascending class order.
pub fn aps_prediction_set(probs: &ProbabilityVector, threshold: Threshold) -> Vec<usize> {
    if threshold.is_infinite() {
        return (0..probs.len()).collect();
    }
    let t = threshold.value();
    probs.aps_scores().into_iter().enumerate().filter(|&(_, s)| s <= t).map(|(class, _)| class).collect()
}

/// Lower/upper conditional quantile predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantilePair {
    lo: f64,
    hi: f64,
    repaired: bool,
}

impl QuantilePair {
    /// Crossing predictions (`lo > hi`) are swapped and flagged.
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation(format!("quantile predictions must be finite, got ({lo}, {hi})")));
        }
        Ok(if lo > hi {
            QuantilePair { lo: hi, hi: lo, repaired: true }
        } else {
            QuantilePair { lo, hi, repaired: false }
        })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    /// True when construction had to swap crossing predictions.
    pub fn was_repaired(&self) -> bool {
        self.repaired
    }
}

/// CQR score `max(lo − y, y − hi)`.
pub fn cqr_score(y: f64, pred: &QuantilePair) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::validation(format!("target {y} is not finite")));
    }
    Ok((pred.lo - y).max(y - pred.hi))
}

/// Closed real interval, or the whole line when `unbounded` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub lo: f64,
    pub hi: f64,
    pub unbounded: bool,
}

impl PredictionInterval {
    pub fn unbounded() -> Self {
        PredictionInterval { lo: f64::NEG_INFINITY, hi: f64::INFINITY, unbounded: true }
    }

    pub fn contains(&self, y: f64) -> bool {
        self.unbounded || (self.lo <= y && y <= self.hi)
    }

    /// `hi − lo`, infinite for the unbounded interval.
    pub fn length(&self) -> f64 {
        if self.unbounded {
            f64::INFINITY
        } else {
            (self.hi - self.lo).max(0.0)
        }
    }
}

/// `[lo − t, hi + t]`; negative thresholds shrink the interval.
pub fn cqr_prediction_interval(pred: &QuantilePair, threshold: Threshold) -> PredictionInterval {
    if threshold.is_infinite() {
        return PredictionInterval::unbounded();
    }
    let t = threshold.value();
    PredictionInterval { lo: pred.lo - t, hi: pred.hi + t, unbounded: false }
}
