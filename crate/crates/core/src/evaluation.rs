//! Coverage and efficiency metrics, per-run reports and multi-seed summaries.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::calibration::AgentId;
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scores::PredictionInterval;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;

/// One test point's prediction and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PredictionRecord {
    Classification { set: Vec<usize>, label: usize },
    Regression { interval: PredictionInterval, value: f64 },
}

impl PredictionRecord {
    pub fn covered(&self) -> bool {
        match self {
            PredictionRecord::Classification { set, label } => set.contains(label),
            PredictionRecord::Regression { interval, value } => interval.contains(*value),
        }
    }

    /// Set cardinality or interval length (`inf` when unbounded).
    pub fn size(&self) -> f64 {
        match self {
            PredictionRecord::Classification { set, .. } => set.len() as f64,
            PredictionRecord::Regression { interval, .. } => interval.length(),
        }
    }
}

/// Fraction of records whose truth lies in the prediction.
pub fn coverage(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("coverage of an empty record list"));
    }
    Ok(records.iter().filter(|r| r.covered()).count() as f64 / records.len() as f64)
}

/// Mean set size or interval length; `inf` as soon as one interval is
/// unbounded.
pub fn efficiency(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::validation("efficiency of an empty record list"));
    }
    let mut total = 0.0;
    for r in records {
        let size = r.size();
        if size.is_infinite() {
            return Ok(f64::INFINITY);
        }
        total += size;
    }
    Ok(total / records.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Linear-interpolation percentile of sorted data, `p` in `[0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Median with a 95% percentile-bootstrap interval over
/// [`BOOTSTRAP_RESAMPLES`] seeded resamples. The interval is widened to
/// contain the median if the bootstrap misses it.
pub fn seed_summary(values: &[f64], seed: u64) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::validation(format!("need at least 2 values, got {}", values.len())));
    }
    let mid = median(values);
    if mid.is_infinite() || values.iter().any(|v| v.is_nan()) {
        return Ok(SeedSummary { median: mid, ci_lo: mid, ci_hi: mid, n_seeds: values.len() });
    }
    let mut rng = seeded(seed, 0xB007);
    let mut resample = vec![0.0; values.len()];
    let mut medians: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            for slot in resample.iter_mut() {
                *slot = values[rng.random_range(0..values.len())];
            }
            median(&resample)
        })
        .collect();
    medians.sort_by(f64::total_cmp);
    Ok(SeedSummary {
        median: mid,
        ci_lo: percentile(&medians, 0.025).min(mid),
        ci_hi: percentile(&medians, 0.975).max(mid),
        n_seeds: values.len(),
    })
}

/// Per-agent and global metrics of one method on one seed. Global values
/// are unweighted means over agents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub per_agent_coverage: BTreeMap<AgentId, f64>,
    pub global_coverage: f64,
    pub per_agent_efficiency: BTreeMap<AgentId, f64>,
    pub global_efficiency: f64,
    pub test_size: usize,
    pub method: AggregationMethod,
    pub seed: u64,
    /// Wall time of calibration plus aggregation, when measured.
    #[serde(default)]
    pub runtime_s: Option<f64>,
}

/// Builds a report from each agent's records on the shared test set. Agents
/// `0..agent_count` must all be present.
pub fn build_report(
    records: &BTreeMap<AgentId, Vec<PredictionRecord>>,
    agent_count: usize,
    method: AggregationMethod,
    seed: u64,
) -> Result<CoverageReport> {
    if agent_count == 0 {
        return Err(Error::validation("report needs at least one agent"));
    }
    if let Some(missing) = (0..agent_count).find(|k| !records.contains_key(k)) {
        return Err(Error::validation(format!("no records for agent {missing}")));
    }
    if let Some(extra) = records.keys().find(|&&k| k >= agent_count) {
        return Err(Error::validation(format!("unexpected agent {extra}")));
    }
    let mut per_agent_coverage = BTreeMap::new();
    let mut per_agent_efficiency = BTreeMap::new();
    for (&agent, recs) in records {
        per_agent_coverage.insert(agent, coverage(recs)?);
        per_agent_efficiency.insert(agent, efficiency(recs)?);
    }
    let m = agent_count as f64;
    Ok(CoverageReport {
        global_coverage: per_agent_coverage.values().sum::<f64>() / m,
        global_efficiency: per_agent_efficiency.values().sum::<f64>() / m,
        per_agent_coverage,
        per_agent_efficiency,
        test_size: records.values().map(Vec::len).max().unwrap_or(0),
        method,
        seed,
        runtime_s: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cls(set: &[usize], label: usize) -> PredictionRecord {
        PredictionRecord::Classification { set: set.to_vec(), label }
    }

    fn reg(lo: f64, hi: f64, value: f64) -> PredictionRecord {
        PredictionRecord::Regression { interval: PredictionInterval { lo, hi, unbounded: false }, value }
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&[cls(&[0], 0), cls(&[1, 2], 2)]).unwrap(), 1.0);
        assert_eq!(coverage(&[cls(&[], 0), cls(&[], 2)]).unwrap(), 0.0);
        let half = [cls(&[0], 0), cls(&[0], 1), reg(0.0, 1.0, 1.0), reg(0.0, 1.0, 1.5), cls(&[3], 3), cls(&[], 1)];
        assert_eq!(coverage(&half).unwrap(), 0.5);
        assert!(coverage(&[]).is_err());
        let unbounded = PredictionRecord::Regression { interval: PredictionInterval::unbounded(), value: 1e12 };
        assert_eq!(coverage(&[unbounded]).unwrap(), 1.0);
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(efficiency(&[cls(&[0], 0), cls(&[4], 1)]).unwrap(), 1.0);
        assert_eq!(efficiency(&[reg(1.0, 9.0, 0.0), reg(1.0, 9.0, 3.0)]).unwrap(), 8.0);
        assert_eq!(efficiency(&[cls(&[], 0), cls(&[0, 1], 0), cls(&[0, 1, 2, 3], 0)]).unwrap(), 2.0);
        let unbounded = PredictionRecord::Regression { interval: PredictionInterval::unbounded(), value: 0.0 };
        assert!(efficiency(&[reg(0.0, 1.0, 0.5), unbounded]).unwrap().is_infinite());
    }

    #[test]
    fn seed_summary_examples() {
        let s = seed_summary(&[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(s.median, 2.0);
        let s = seed_summary(&[0.7; 5], 0).unwrap();
        assert_eq!((s.ci_lo, s.median, s.ci_hi), (0.7, 0.7, 0.7));
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = seed_summary(&values, 42).unwrap();
        assert_eq!(s.median, 5.5);
        assert!(s.ci_lo <= 5.5 && 5.5 <= s.ci_hi);
        assert!(s.ci_lo >= 1.0 && s.ci_hi <= 10.0);
        assert_eq!(s, seed_summary(&values, 42).unwrap());
        assert!(seed_summary(&[1.0], 0).is_err());
    }

    #[test]
    fn bootstrap_interval_matches_independent_resampler() {
        // Independent bootstrap with a different generator lands near the same bounds.
        use rand::SeedableRng;
        let values: Vec<f64> = (1..=10).map(f64::from).collect();
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let mut meds: Vec<f64> = (0..20_000)
            .map(|_| median(&(0..10).map(|_| values[rng.random_range(0..10)]).collect::<Vec<_>>()))
            .collect();
        meds.sort_by(f64::total_cmp);
        let lo = meds[(0.025 * 19_999.0) as usize];
        let hi = meds[(0.975 * 19_999.0) as usize];
        let s = seed_summary(&values, 3).unwrap();
        assert!((s.ci_lo - lo).abs() <= 1.0 && (s.ci_hi - hi).abs() <= 1.0, "{s:?} vs ({lo}, {hi})");
    }

    #[test]
    fn report_footnote_average() {
        let mut records = BTreeMap::new();
        records.insert(0, vec![cls(&[0], 0); 10]);
        let mut nine = vec![cls(&[0], 0); 9];
        nine.push(cls(&[1], 0));
        records.insert(1, nine);
        let report = build_report(&records, 2, AggregationMethod::WeightedAverage, 1).unwrap();
        assert!((report.global_coverage - 0.95).abs() < 1e-12);
        assert_eq!(report.test_size, 10);

        let mut one = BTreeMap::new();
        one.insert(0, vec![cls(&[0], 0), cls(&[1], 0)]);
        let report = build_report(&one, 1, AggregationMethod::LocalOnly, 1).unwrap();
        assert_eq!(report.global_coverage, 0.5);

        assert!(build_report(&one, 2, AggregationMethod::LocalOnly, 1).is_err());
    }

    #[test]
    fn report_is_order_independent() {
        let a = vec![cls(&[0], 0), cls(&[0, 1], 1)];
        let b = vec![cls(&[], 0)];
        let mut first = BTreeMap::new();
        first.insert(0, a.clone());
        first.insert(1, b.clone());
        let mut second = BTreeMap::new();
        second.insert(1, b);
        second.insert(0, a);
        assert_eq!(
            build_report(&first, 2, AggregationMethod::WeightedAverage, 0).unwrap(),
            build_report(&second, 2, AggregationMethod::WeightedAverage, 0).unwrap()
        );
    }

    fn records_at(cases: &[(Vec<f64>, usize)], threshold: f64) -> Vec<PredictionRecord> {
        use crate::scores::{aps_prediction_set, ProbabilityVector};
        use crate::threshold::Threshold;
        cases
            .iter()
            .map(|(w, label)| {
                let total: f64 = w.iter().sum();
                let probs = ProbabilityVector::new(w.iter().map(|x| x / total).collect()).unwrap();
                cls(&aps_prediction_set(&probs, Threshold::new(threshold).unwrap()), *label)
            })
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn metrics_are_monotone_in_the_threshold(
            cases in proptest::collection::vec(
                (proptest::collection::vec(0.01f64..1.0, 4), 0usize..4),
                1..40,
            ),
            a in 0.0f64..1.2,
            b in 0.0f64..1.2,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let small = records_at(&cases, lo);
            let large = records_at(&cases, hi);
            let (c_lo, c_hi) = (coverage(&small).unwrap(), coverage(&large).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&c_lo) && c_lo <= c_hi);
            proptest::prop_assert!(efficiency(&small).unwrap() <= efficiency(&large).unwrap());
        }
    }
}
