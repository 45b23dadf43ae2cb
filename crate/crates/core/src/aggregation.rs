//! Server-side combination of local summaries into a global threshold.
//!
//! `WeightedAverage` is the calibration-size weighted mean of local
//! quantiles. The remaining methods are the unweighted ablation and the
//! baselines it is compared against: pooled scores (FCP), a single outer
//! order statistic over local quantiles (a conservative FedCP-QQ stand-in)
//! and purely local thresholds (SplitCP).

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    conformal_ceil, local_threshold, order_statistic, AgentId, CalibrationConfig, LocalQuantileSummary, ScoreSample,
};
use crate::error::{Error, Result};
use crate::threshold::Threshold;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    WeightedAverage,
    UnweightedAverage,
    PooledScores,
    QuantileOfQuantiles,
    LocalOnly,
}

impl AggregationMethod {
    pub const ALL: [AggregationMethod; 5] = [
        AggregationMethod::WeightedAverage,
        AggregationMethod::UnweightedAverage,
        AggregationMethod::PooledScores,
        AggregationMethod::QuantileOfQuantiles,
        AggregationMethod::LocalOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregationMethod::WeightedAverage => "weighted_average",
            AggregationMethod::UnweightedAverage => "unweighted_average",
            AggregationMethod::PooledScores => "pooled_scores",
            AggregationMethod::QuantileOfQuantiles => "quantile_of_quantiles",
            AggregationMethod::LocalOnly => "local_only",
        }
    }

    /// Whether agents disclose only `(q, n)`.
    pub fn is_one_shot(&self) -> bool {
        !matches!(self, AggregationMethod::PooledScores)
    }
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let method = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "weighted_average" | "fedwq_cp" | "fedwq" => AggregationMethod::WeightedAverage,
            "unweighted_average" | "fedavgq_cp" | "fedavgq" => AggregationMethod::UnweightedAverage,
            "pooled_scores" | "fcp" => AggregationMethod::PooledScores,
            "quantile_of_quantiles" | "fedcp_qq" => AggregationMethod::QuantileOfQuantiles,
            "local_only" | "splitcp" | "split_cp" => AggregationMethod::LocalOnly,
            other => return Err(Error::validation(format!("unknown aggregation method {other:?}"))),
        };
        Ok(method)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatedThreshold {
    pub q_hat: Threshold,
    pub method: AggregationMethod,
    /// `N = Σ n_k` over contributing agents.
    pub total_n: usize,
    /// `M`, the number of contributing agents.
    pub agent_count: usize,
}

/// Validates a summary list and returns it sorted by agent id, so every
/// reduction below runs in one canonical order.
fn canonical(summaries: &[LocalQuantileSummary]) -> Result<Vec<LocalQuantileSummary>> {
    if summaries.is_empty() {
        return Err(Error::validation("no summaries to aggregate"));
    }
    let mut seen = BTreeSet::new();
    for s in summaries {
        if !seen.insert(s.agent_id) {
            return Err(Error::protocol("duplicate_agent", format!("agent {} reported more than once", s.agent_id)));
        }
        if s.n == 0 {
            return Err(Error::validation(format!("agent {} reported n = 0", s.agent_id)));
        }
        if s.q.value().is_nan() {
            return Err(Error::validation(format!("agent {} reported NaN", s.agent_id)));
        }
    }
    let mut sorted = summaries.to_vec();
    sorted.sort_by_key(|s| s.agent_id);
    Ok(sorted)
}

fn bounded_mean(sorted: &[LocalQuantileSummary], weights: impl Iterator<Item = f64>) -> Threshold {
    if sorted.iter().any(|s| s.q.is_infinite()) {
        return Threshold::INFINITE;
    }
    let mean: f64 = sorted.iter().zip(weights).map(|(s, w)| w * s.q.value()).sum();
    let lo = sorted.iter().map(|s| s.q.value()).fold(f64::INFINITY, f64::min);
    let hi = sorted.iter().map(|s| s.q.value()).fold(f64::NEG_INFINITY, f64::max);
    // Rounding may push a convex combination an ulp outside the hull.
    Threshold::finite(mean.clamp(lo, hi)).expect("mean of finite thresholds")
}

/// `q̂ = Σ (n_k / N) q̂_k`. Any sentinel input yields the sentinel.
pub fn weighted_average(summaries: &[LocalQuantileSummary]) -> Result<AggregatedThreshold> {
    let sorted = canonical(summaries)?;
    let total_n: usize = sorted.iter().map(|s| s.n).sum();
    let weights = sorted.iter().map(|s| s.n as f64 / total_n as f64);
    Ok(AggregatedThreshold {
        q_hat: bounded_mean(&sorted, weights),
        method: AggregationMethod::WeightedAverage,
        total_n,
        agent_count: sorted.len(),
    })
}

/// Plain mean of local quantiles; `n_k` only feeds `total_n`.
pub fn unweighted_average(summaries: &[LocalQuantileSummary]) -> Result<AggregatedThreshold> {
    let sorted = canonical(summaries)?;
    let total_n: usize = sorted.iter().map(|s| s.n).sum();
    let m = sorted.len() as f64;
    Ok(AggregatedThreshold {
        q_hat: bounded_mean(&sorted, std::iter::repeat(1.0 / m)),
        method: AggregationMethod::UnweightedAverage,
        total_n,
        agent_count: sorted.len(),
    })
}

/// Split conformal threshold of the concatenated scores. This is also the
/// empirical mixture quantile `q̂_mix`.
pub fn pooled_scores_threshold(samples: &[ScoreSample], config: &CalibrationConfig) -> Result<AggregatedThreshold> {
    if samples.is_empty() {
        return Err(Error::validation("no score samples to pool"));
    }
    let pooled: Vec<f64> = samples.iter().flat_map(|s| s.scores().iter().copied()).collect();
    let pooled = ScoreSample::new(pooled)?;
    let summary = local_threshold(0, &pooled, config);
    Ok(AggregatedThreshold {
        q_hat: summary.q,
        method: AggregationMethod::PooledScores,
        total_n: pooled.len(),
        agent_count: samples.len(),
    })
}

/// The `s`-th smallest local quantile with `s = ceil((M + 1)(1 − alpha))`;
/// the sentinel when `s > M`.
pub fn quantile_of_quantiles(
    summaries: &[LocalQuantileSummary],
    config: &CalibrationConfig,
) -> Result<AggregatedThreshold> {
    let sorted = canonical(summaries)?;
    let m = sorted.len();
    let s = conformal_ceil((m as f64 + 1.0) * (1.0 - config.alpha())).max(1);
    let q_hat = if s > m {
        Threshold::INFINITE
    } else {
        let values: Vec<f64> = sorted.iter().map(|x| x.q.value()).collect();
        Threshold::new(order_statistic(&values, s))?
    };
    Ok(AggregatedThreshold {
        q_hat,
        method: AggregationMethod::QuantileOfQuantiles,
        total_n: sorted.iter().map(|x| x.n).sum(),
        agent_count: m,
    })
}

/// Inputs the server may hold for a round.
#[derive(Clone, Copy, Debug)]
pub enum AggregationInput<'a> {
    Summaries(&'a [LocalQuantileSummary]),
    /// Raw per-agent scores, indexed by position; only `PooledScores` accepts these.
    Samples(&'a [ScoreSample]),
}

/// Result of a round: one global threshold, or per-agent thresholds for
/// `LocalOnly`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AggregationOutcome {
    Global(AggregatedThreshold),
    PerAgent(Vec<(AgentId, AggregatedThreshold)>),
}

impl AggregationOutcome {
    /// Threshold an agent should use; `None` if a `LocalOnly` round never
    /// heard from it.
    pub fn for_agent(&self, agent: AgentId) -> Option<&AggregatedThreshold> {
        match self {
            AggregationOutcome::Global(t) => Some(t),
            AggregationOutcome::PerAgent(list) => list.iter().find(|(id, _)| *id == agent).map(|(_, t)| t),
        }
    }

    pub fn global(&self) -> Option<&AggregatedThreshold> {
        match self {
            AggregationOutcome::Global(t) => Some(t),
            AggregationOutcome::PerAgent(_) => None,
        }
    }
}

pub fn aggregate(
    input: AggregationInput<'_>,
    method: AggregationMethod,
    config: &CalibrationConfig,
) -> Result<AggregationOutcome> {
    use AggregationInput::*;
    use AggregationMethod::*;
    let outcome = match (method, input) {
        (WeightedAverage, Summaries(s)) => AggregationOutcome::Global(weighted_average(s)?),
        (UnweightedAverage, Summaries(s)) => AggregationOutcome::Global(unweighted_average(s)?),
        (QuantileOfQuantiles, Summaries(s)) => AggregationOutcome::Global(quantile_of_quantiles(s, config)?),
        (PooledScores, Samples(s)) => AggregationOutcome::Global(pooled_scores_threshold(s, config)?),
        (LocalOnly, Summaries(s)) => {
            let sorted = canonical(s)?;
            AggregationOutcome::PerAgent(
                sorted
                    .into_iter()
                    .map(|x| {
                        let t = AggregatedThreshold { q_hat: x.q, method: LocalOnly, total_n: x.n, agent_count: 1 };
                        (x.agent_id, t)
                    })
                    .collect(),
            )
        }
        (method, Samples(_)) => {
            return Err(Error::validation(format!("{method} aggregates summaries, not raw scores")))
        }
        (PooledScores, Summaries(_)) => return Err(Error::validation("pooled_scores requires raw score samples")),
    };
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn summary(agent_id: AgentId, q: f64, n: usize) -> LocalQuantileSummary {
        LocalQuantileSummary::new(agent_id, Threshold::new(q).unwrap(), n).unwrap()
    }

    fn cfg(alpha: f64) -> CalibrationConfig {
        CalibrationConfig::new(alpha).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn weighted_examples() {
        let out = weighted_average(&[summary(0, 0.5, 100), summary(1, 0.9, 300)]).unwrap();
        assert!(close(out.q_hat.value(), 0.8));
        assert_eq!((out.total_n, out.agent_count), (400, 2));
        assert_eq!(weighted_average(&[summary(4, 0.7, 42)]).unwrap().q_hat.value(), 0.7);
        let out = weighted_average(&[summary(0, 0.2, 10), summary(1, 0.4, 10), summary(2, 0.9, 10)]).unwrap();
        assert!(close(out.q_hat.value(), 0.5));
    }

    #[test]
    fn unweighted_examples() {
        let out = unweighted_average(&[summary(0, 0.5, 100), summary(1, 0.9, 300)]).unwrap();
        assert!(close(out.q_hat.value(), 0.7));
        assert_eq!(out.total_n, 400);
        assert_eq!(unweighted_average(&[summary(0, 0.7, 1)]).unwrap().q_hat.value(), 0.7);
        let equal = [summary(0, 0.1, 7), summary(1, 0.6, 7), summary(2, 0.35, 7)];
        assert!(close(
            unweighted_average(&equal).unwrap().q_hat.value(),
            weighted_average(&equal).unwrap().q_hat.value()
        ));
    }

    #[test]
    fn sentinel_propagates_through_averages() {
        let s = [summary(0, 0.5, 100), LocalQuantileSummary::new(1, Threshold::INFINITE, 3).unwrap()];
        assert!(weighted_average(&s).unwrap().q_hat.is_infinite());
        assert!(unweighted_average(&s).unwrap().q_hat.is_infinite());
    }

    #[test]
    fn errors() {
        assert!(matches!(weighted_average(&[]), Err(Error::Validation(_))));
        let dup = [summary(1, 0.5, 10), summary(1, 0.6, 10)];
        assert!(matches!(weighted_average(&dup), Err(Error::Protocol { .. })));
        assert!(matches!(quantile_of_quantiles(&dup, &cfg(0.1)), Err(Error::Protocol { .. })));
        let s = [summary(0, 0.5, 10)];
        assert!(aggregate(AggregationInput::Summaries(&s), AggregationMethod::PooledScores, &cfg(0.1)).is_err());
        let samples = [ScoreSample::new(vec![1.0]).unwrap()];
        assert!(aggregate(AggregationInput::Samples(&samples), AggregationMethod::WeightedAverage, &cfg(0.1)).is_err());
        assert!(pooled_scores_threshold(&[], &cfg(0.1)).is_err());
    }

    /// Pool, sort, index.
    fn pooled_oracle(samples: &[Vec<f64>], alpha: f64) -> f64 {
        let mut all: Vec<f64> = samples.concat();
        all.sort_by(f64::total_cmp);
        let r = ((all.len() as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
        if r > all.len() {
            f64::INFINITY
        } else {
            all[r - 1]
        }
    }

    #[test]
    fn pooled_examples() {
        let a = ScoreSample::new(vec![1.0, 2.0, 3.0]).unwrap();
        let b = ScoreSample::new(vec![4.0, 5.0, 6.0]).unwrap();
        let out = pooled_scores_threshold(&[a.clone(), b], &cfg(0.2)).unwrap();
        assert_eq!(out.q_hat.value(), pooled_oracle(&[vec![1., 2., 3.], vec![4., 5., 6.]], 0.2));
        assert_eq!(out.q_hat.value(), 6.0);
        assert_eq!((out.total_n, out.agent_count), (6, 2));

        let single = pooled_scores_threshold(std::slice::from_ref(&a), &cfg(0.3)).unwrap();
        assert_eq!(single.q_hat, local_threshold(0, &a, &cfg(0.3)).q);
    }

    #[test]
    fn pooled_identical_multisets_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.random_range(1..60);
            let alpha = rng.random_range(1..50) as f64 / 100.0;
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let s = ScoreSample::new(scores.clone()).unwrap();
            let pooled = pooled_scores_threshold(&[s.clone(), s.clone()], &cfg(alpha)).unwrap();
            assert_eq!(pooled.q_hat.value(), pooled_oracle(&[scores.clone(), scores.clone()], alpha));
            let local = local_threshold(0, &s, &cfg(alpha)).q.value();
            let r_local = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
            let r_pool = ((2.0 * n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil() as usize;
            // Ranks align when the pooled rank lands in the same duplicate pair.
            if r_local <= n && (r_pool == 2 * r_local || r_pool == 2 * r_local - 1) {
                assert_eq!(pooled.q_hat.value(), local);
            }
        }
    }

    #[test]
    fn quantile_of_quantiles_examples() {
        assert!(quantile_of_quantiles(&[summary(0, 0.7, 10)], &cfg(0.05)).unwrap().q_hat.is_infinite());
        let nineteen: Vec<_> = (0..19).map(|k| summary(k, (k + 1) as f64, 10)).collect();
        assert_eq!(quantile_of_quantiles(&nineteen, &cfg(0.05)).unwrap().q_hat.value(), 19.0);
        let six: Vec<_> = (0..6).map(|k| summary(k, 0.9, 100)).collect();
        assert!(quantile_of_quantiles(&six, &cfg(0.05)).unwrap().q_hat.is_infinite());
    }

    #[test]
    fn dispatch() {
        let s = [summary(0, 0.5, 100), summary(1, 0.9, 300)];
        let c = cfg(0.05);
        let out = aggregate(AggregationInput::Summaries(&s), AggregationMethod::WeightedAverage, &c).unwrap();
        assert!(close(out.global().unwrap().q_hat.value(), 0.8));
        let out = aggregate(AggregationInput::Summaries(&s), AggregationMethod::LocalOnly, &c).unwrap();
        assert_eq!(out.for_agent(0).unwrap().q_hat.value(), 0.5);
        assert_eq!(out.for_agent(1).unwrap().q_hat.value(), 0.9);
        assert_eq!(out.for_agent(1).unwrap().total_n, 300);
        assert!(out.for_agent(2).is_none());
        let samples = [ScoreSample::new(vec![1.0, 2.0, 3.0]).unwrap(), ScoreSample::new(vec![4.0, 5.0, 6.0]).unwrap()];
        let out = aggregate(AggregationInput::Samples(&samples), AggregationMethod::PooledScores, &cfg(0.2)).unwrap();
        assert_eq!(out.global().unwrap().q_hat.value(), 6.0);
    }

    #[test]
    fn method_names_round_trip() {
        for m in AggregationMethod::ALL {
            assert_eq!(m.as_str().parse::<AggregationMethod>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert_eq!("FedCP-QQ".parse::<AggregationMethod>().unwrap(), AggregationMethod::QuantileOfQuantiles);
        assert!("dp_fedcp".parse::<AggregationMethod>().is_err());
    }

    #[test]
    fn weighted_differs_from_mixture_on_disjoint_supports() {
        let a = ScoreSample::new((0..100).map(|i| i as f64 / 100.0).collect()).unwrap();
        let b = ScoreSample::new((0..300).map(|i| 10.0 + i as f64 / 300.0).collect()).unwrap();
        let c = cfg(0.1);
        let wa = weighted_average(&[local_threshold(0, &a, &c), local_threshold(1, &b, &c)]).unwrap();
        let pooled = pooled_scores_threshold(&[a, b], &c).unwrap();
        assert!((wa.q_hat.value() - pooled.q_hat.value()).abs() > 1.0);
    }

    #[test]
    fn weighted_tracks_mixture_for_identical_generators() {
        let c = cfg(0.05);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<ScoreSample> = (0..4)
                .map(|_| {
                    let n = rng.random_range(500..900);
                    ScoreSample::new((0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
                })
                .collect();
            let summaries: Vec<_> = samples.iter().enumerate().map(|(k, s)| local_threshold(k, s, &c)).collect();
            let wa = weighted_average(&summaries).unwrap().q_hat.value();
            let pooled = pooled_scores_threshold(&samples, &c).unwrap().q_hat.value();
            assert!((wa - pooled).abs() <= 0.05, "seed {seed}: {wa} vs {pooled}");
        }
    }

    fn summaries_strategy() -> impl Strategy<Value = Vec<LocalQuantileSummary>> {
        prop::collection::vec((-10.0f64..10.0, 1usize..1000), 1..8)
            .prop_map(|v| v.into_iter().enumerate().map(|(k, (q, n))| summary(k, q, n)).collect())
    }

    proptest! {
        #[test]
        fn weighted_is_bounded(s in summaries_strategy()) {
            let q = weighted_average(&s).unwrap().q_hat.value();
            let lo = s.iter().map(|x| x.q.value()).fold(f64::INFINITY, f64::min);
            let hi = s.iter().map(|x| x.q.value()).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= q && q <= hi);
        }

        #[test]
        fn equal_quantiles_collapse(v in -10.0f64..10.0, ns in prop::collection::vec(1usize..500, 1..8), alpha in 0.01f64..0.5) {
            let s: Vec<_> = ns.iter().enumerate().map(|(k, &n)| summary(k, v, n)).collect();
            prop_assert_eq!(weighted_average(&s).unwrap().q_hat.value(), v);
            prop_assert_eq!(unweighted_average(&s).unwrap().q_hat.value(), v);
            let qq = quantile_of_quantiles(&s, &cfg(alpha)).unwrap().q_hat;
            prop_assert!(qq.is_infinite() || qq.value() == v);
        }

        #[test]
        fn doubling_n_moves_toward_agent(s in summaries_strategy(), pick in any::<prop::sample::Index>()) {
            let i = pick.index(s.len());
            let before = weighted_average(&s).unwrap().q_hat.value();
            let mut doubled = s.clone();
            doubled[i].n *= 2;
            let after = weighted_average(&doubled).unwrap().q_hat.value();
            let target = s[i].q.value();
            if s.iter().any(|x| (x.q.value() - target).abs() > 1e-6) && (before - target).abs() > 1e-9 {
                prop_assert!((after - target).abs() < (before - target).abs());
            }
        }

        #[test]
        fn permutation_invariance(s in summaries_strategy(), alpha in 0.01f64..0.5, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = s.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let c = cfg(alpha);
            for method in [AggregationMethod::WeightedAverage, AggregationMethod::UnweightedAverage,
                           AggregationMethod::QuantileOfQuantiles, AggregationMethod::LocalOnly] {
                let a = aggregate(AggregationInput::Summaries(&s), method, &c).unwrap();
                let b = aggregate(AggregationInput::Summaries(&shuffled), method, &c).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
