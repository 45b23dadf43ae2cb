//! Audits of the aggregation stability bound, the oracle pooled-threshold
//! shift bound and the coverage decomposition.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::distribution::{
    mixture_quantile_population, population_quantile, tv_distance, AnalyticDistribution, MixtureSpec,
};
use crate::aggregation::{pooled_scores_threshold, weighted_average};
use crate::calibration::{empirical_quantile_index, local_threshold, CalibrationConfig, ScoreSample};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::threshold::Threshold;

pub const DENSITY_GRID_POINTS: usize = 10_001;
pub const STABILITY_TOLERANCE: f64 = 1e-9;
/// Monte Carlo slack, in standard errors.
pub const MC_SLACK_SE: f64 = 3.0;
/// Smallest window used when every local quantile equals `q_mix`.
const MIN_DELTA: f64 = 1e-9;

/// Stability bound inputs: mixture, level, window `δ` and the density bounds
/// `c ≤ f_mix` and `f_mix, f_k ≤ L` on `[q_mix − δ, q_mix + δ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityBoundInput {
    pub mixture: MixtureSpec,
    pub alpha: f64,
    pub delta: f64,
    pub c: f64,
    pub l: f64,
    pub q_mix: f64,
    /// Population quantile `q_k` per component.
    pub local_quantiles: Vec<f64>,
}

impl StabilityBoundInput {
    /// Evaluates the exact densities on a [`DENSITY_GRID_POINTS`] grid over
    /// the window.
    pub fn new(mixture: MixtureSpec, alpha: f64, delta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::validation(format!("alpha {alpha} outside (0, 1)")));
        }
        if !(delta.is_finite() && delta > 0.0) {
            return Err(Error::validation(format!("window {delta} must be positive")));
        }
        if mixture.components().iter().any(|(d, _)| d.pdf(0.0).is_none()) {
            return Err(Error::validation("stability bound needs continuous components"));
        }
        let p = 1.0 - alpha;
        let q_mix = mixture_quantile_population(&mixture, p)?;
        let local_quantiles =
            mixture.components().iter().map(|(d, _)| population_quantile(d, p)).collect::<Result<Vec<_>>>()?;
        let mut c = f64::INFINITY;
        let mut l = 0.0f64;
        for i in 0..DENSITY_GRID_POINTS {
            let v = q_mix - delta + 2.0 * delta * i as f64 / (DENSITY_GRID_POINTS - 1) as f64;
            let f_mix = mixture.pdf(v).expect("continuous components");
            c = c.min(f_mix);
            l = l.max(f_mix);
            for (d, _) in mixture.components() {
                l = l.max(d.pdf(v).expect("continuous components"));
            }
        }
        Ok(StabilityBoundInput { mixture, alpha, delta, c, l, q_mix, local_quantiles })
    }

    /// Input with the smallest window satisfying the proposition's
    /// precondition, `δ = max_k |q_k − q_mix|`.
    pub fn tightest(mixture: MixtureSpec, alpha: f64) -> Result<Self> {
        let p = 1.0 - alpha;
        let q_mix = mixture_quantile_population(&mixture, p)?;
        let mut delta = MIN_DELTA;
        for (d, _) in mixture.components() {
            delta = delta.max((population_quantile(d, p)? - q_mix).abs());
        }
        Self::new(mixture, alpha, delta)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BoundCheck {
    Checked { holds: bool, lhs: f64, rhs: f64 },
    Skipped { reason: String },
}

impl BoundCheck {
    pub fn is_violation(&self) -> bool {
        matches!(self, BoundCheck::Checked { holds: false, .. })
    }
}

/// `|q_avg − q_mix| ≤ (L / c) Σ_j Σ_k w_j w_k |q_j − q_k|`, within
/// [`STABILITY_TOLERANCE`].
pub fn check_stability_bound(input: &StabilityBoundInput) -> Result<BoundCheck> {
    if input.c.is_nan() || input.c <= 0.0 {
        return Ok(BoundCheck::Skipped { reason: format!("density lower bound c = {} is not positive", input.c) });
    }
    let max_dev = input.local_quantiles.iter().map(|q| (q - input.q_mix).abs()).fold(0.0, f64::max);
    if max_dev > input.delta {
        return Ok(BoundCheck::Skipped {
            reason: format!("max |q_k - q_mix| = {max_dev} exceeds window {}", input.delta),
        });
    }
    let w = input.mixture.weights();
    let q = &input.local_quantiles;
    let q_avg: f64 = w.iter().zip(q).map(|(w, q)| w * q).sum();
    let mut dispersion = 0.0;
    for (wj, qj) in w.iter().zip(q) {
        for (wk, qk) in w.iter().zip(q) {
            dispersion += wj * wk * (qj - qk).abs();
        }
    }
    let lhs = (q_avg - input.q_mix).abs();
    let rhs = input.l / input.c * dispersion;
    Ok(BoundCheck::Checked { holds: lhs <= rhs + STABILITY_TOLERANCE, lhs, rhs })
}

/// Random 2–5 component Gaussian mixture: means in `[−1, 1]`, σ in
/// `[0.5, 2]`, sample-size weights in `[1, 1000]`.
pub fn random_gaussian_mixture<R: Rng + ?Sized>(rng: &mut R) -> MixtureSpec {
    let m = rng.random_range(2..=5);
    let components = (0..m)
        .map(|_| {
            let d = AnalyticDistribution::gaussian(rng.random_range(-1.0..=1.0), rng.random_range(0.5..=2.0))
                .expect("valid ranges");
            (d, rng.random_range(1..=1000) as f64)
        })
        .collect();
    MixtureSpec::new(components).expect("positive weights")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCase {
    pub case: usize,
    pub alpha: f64,
    pub components: usize,
    pub delta: f64,
    pub c: f64,
    pub l: f64,
    pub result: BoundCheck,
}

/// `cases` random mixtures, each from its own generator, α alternating
/// between 0.05 and 0.1.
pub fn stability_audit(cases: usize, seed: u64) -> Result<Vec<StabilityCase>> {
    (0..cases)
        .into_par_iter()
        .map(|case| {
            let mut rng = seeded(seed, case as u64);
            let mixture = random_gaussian_mixture(&mut rng);
            let alpha = if case % 2 == 0 { 0.05 } else { 0.1 };
            let components = mixture.components().len();
            let input = StabilityBoundInput::tightest(mixture, alpha)?;
            Ok(StabilityCase {
                case,
                alpha,
                components,
                delta: input.delta,
                c: input.c,
                l: input.l,
                result: check_stability_bound(&input)?,
            })
        })
        .collect()
}

/// Monte Carlo verdict with the numbers that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloBound {
    pub holds: bool,
    pub lhs: f64,
    pub rhs: f64,
    pub stderr: f64,
    pub mean_coverage: f64,
    pub trials: usize,
}

/// Coverage of the split threshold computed from `N = Σ n_k` i.i.d. draws
/// of the calibration mixture, measured exactly under `target`:
/// `|E cov − (1 − α)| ≤ Σ (n_k / N) d_TV(P_k, P_test) + 1 / (N + 1)`,
/// with [`MC_SLACK_SE`] standard errors of slack.
pub fn check_oracle_shift_bound(
    components: &[(AnalyticDistribution, usize)],
    target: &AnalyticDistribution,
    alpha: f64,
    trials: usize,
    seed: u64,
) -> Result<MonteCarloBound> {
    if components.is_empty() || trials < 2 {
        return Err(Error::validation("need at least one component and two trials"));
    }
    let AnalyticDistribution::Discrete { support, .. } = target else {
        return Err(Error::validation("oracle shift bound needs a discrete target"));
    };
    let n_total: usize = components.iter().map(|(_, n)| n).sum();
    if components.iter().any(|(_, n)| *n == 0) {
        return Err(Error::validation("component sizes must be positive"));
    }
    let mut tv_term = 0.0;
    let mut mix_probs = vec![0.0; support.len()];
    for (dist, n) in components {
        let w = *n as f64 / n_total as f64;
        tv_term += w * tv_distance(dist, target)?;
        let AnalyticDistribution::Discrete { probs, .. } = dist else { unreachable!("tv_distance checked the kind") };
        for (m, p) in mix_probs.iter_mut().zip(probs) {
            *m += w * p;
        }
    }
    let mut cumulative: Vec<f64> = mix_probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    *cumulative.last_mut().expect("non-empty support") = f64::INFINITY;
    let rank = empirical_quantile_index(n_total, alpha);
    let coverages: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            if rank.exceeds_sample() {
                return 1.0;
            }
            let mut rng = seeded(seed, trial as u64);
            let mut draws: Vec<usize> = (0..n_total)
                .map(|_| {
                    let u = rng.random::<f64>();
                    cumulative.partition_point(|&c| c <= u)
                })
                .collect();
            let (_, &mut atom, _) = draws.select_nth_unstable(rank.rank - 1);
            target.cdf(support[atom])
        })
        .collect();
    let mean = coverages.iter().sum::<f64>() / trials as f64;
    let var = coverages.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
    let stderr = (var / trials as f64).sqrt();
    let lhs = (mean - (1.0 - alpha)).abs();
    let rhs = tv_term + 1.0 / (n_total as f64 + 1.0);
    Ok(MonteCarloBound { holds: lhs <= rhs + MC_SLACK_SE * stderr, lhs, rhs, stderr, mean_coverage: mean, trials })
}

/// Uniform-grid support `{0, 1/K, …, (K−1)/K}`.
pub fn grid_support(atoms: usize) -> Vec<f64> {
    (0..atoms).map(|i| i as f64 / atoms as f64).collect()
}

fn normalized(weights: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Uniform mass on atoms `lo..hi` of a `atoms`-point grid.
pub fn uniform_block(atoms: usize, lo: usize, hi: usize) -> Result<AnalyticDistribution> {
    if lo >= hi || hi > atoms {
        return Err(Error::validation(format!("empty block {lo}..{hi} of {atoms}")));
    }
    let probs = (0..atoms).map(|i| if (lo..hi).contains(&i) { 1.0 } else { 0.0 }).collect();
    AnalyticDistribution::discrete(grid_support(atoms), normalized(probs))
}

/// Scenario name, agent components with their sample sizes, and target.
pub type ShiftScenario = (String, Vec<(AnalyticDistribution, usize)>, AnalyticDistribution);

/// Named discrete scenarios for the oracle shift audit. All share a
/// 1000-atom support so per-atom mass stays far below `1 / (N + 1)`.
pub fn oracle_shift_scenarios(seed: u64) -> Result<Vec<ShiftScenario>> {
    const ATOMS: usize = 1000;
    let target = uniform_block(ATOMS, 0, ATOMS)?;
    let mut out = vec![
        ("zero_tv".to_string(), vec![(target.clone(), 150), (target.clone(), 250)], target.clone()),
        (
            "two_component_tv_0.1".to_string(),
            vec![(uniform_block(ATOMS, 100, ATOMS)?, 200), (uniform_block(ATOMS, 0, 900)?, 200)],
            target,
        ),
    ];
    let mut rng = seeded(seed, 0x0A11);
    let support = grid_support(ATOMS);
    for s in 0..4 {
        let shape = normalized(support.iter().map(|x| x * (1.0 - x).powi(3) + 1e-3).collect());
        let test = AnalyticDistribution::discrete(support.clone(), shape.clone())?;
        let m = rng.random_range(2..=4);
        let mut sizes: Vec<usize> = (0..m).map(|_| rng.random_range(20..200)).collect();
        let excess = sizes.iter().sum::<usize>() as i64 - 400;
        sizes[0] = (sizes[0] as i64 - excess).max(1) as usize;
        let components = sizes
            .into_iter()
            .map(|n| {
                let eps = rng.random_range(0.0..0.3);
                let noise = normalized((0..ATOMS).map(|_| rng.random::<f64>()).collect());
                let probs = normalized(shape.iter().zip(&noise).map(|(p, r)| (1.0 - eps) * p + eps * r).collect());
                Ok((AnalyticDistribution::discrete(support.clone(), probs)?, n))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((format!("random_perturbation_{s}"), components, test));
    }
    Ok(out)
}

/// Calibration generators per agent plus the test score distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionScenario {
    pub agents: Vec<(AnalyticDistribution, usize)>,
    pub test: MixtureSpec,
    pub alpha: f64,
}

impl DecompositionScenario {
    /// Two agents with different score laws and a third test law.
    pub fn heterogeneous_two_agent() -> Self {
        DecompositionScenario {
            agents: vec![
                (AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.0 }, 800),
                (AnalyticDistribution::Gaussian { mu: 1.0, sigma: 2.0 }, 200),
            ],
            test: single(AnalyticDistribution::Gaussian { mu: 0.3, sigma: 1.3 }),
            alpha: 0.05,
        }
    }

    pub fn identical_agents() -> Self {
        let d = AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.0 };
        DecompositionScenario { agents: vec![(d.clone(), 1000), (d.clone(), 1000)], test: single(d), alpha: 0.05 }
    }

    /// Heterogeneous agents whose size-weighted mixture is the test law.
    pub fn zero_shift() -> Self {
        let agents = vec![
            (AnalyticDistribution::Gaussian { mu: 0.0, sigma: 1.0 }, 600),
            (AnalyticDistribution::Uniform { a: -1.0, b: 3.0 }, 400),
        ];
        let test =
            MixtureSpec::new(agents.iter().map(|(d, n)| (d.clone(), *n as f64)).collect()).expect("positive sizes");
        DecompositionScenario { test, agents, alpha: 0.05 }
    }
}

fn single(d: AnalyticDistribution) -> MixtureSpec {
    MixtureSpec::new(vec![(d, 1.0)]).expect("unit weight")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub q_hat: Threshold,
    pub q_hat_mix: Threshold,
    /// `|cov(q̂) − (1 − α)|`.
    pub total_gap: f64,
    /// `|cov(q̂_mix) − (1 − α)|`.
    pub shift_term: f64,
    /// `|cov(q̂) − cov(q̂_mix)|`.
    pub agg_term: f64,
    /// [`MC_SLACK_SE`] standard deviations of the pooled threshold's
    /// coverage, `sqrt(r (N + 1 − r) / ((N + 1)² (N + 2)))`.
    pub slack: f64,
    pub triangle_holds: bool,
}

fn exact_coverage(test: &MixtureSpec, q: Threshold) -> f64 {
    q.as_finite().map_or(1.0, |v| test.cdf(v))
}

/// Draws each agent's calibration scores, forms the weighted threshold and
/// the pooled one from the same draws, and measures both exactly under the
/// test law.
pub fn decomposition_audit(scenario: &DecompositionScenario, seed: u64) -> Result<Decomposition> {
    if scenario.agents.is_empty() {
        return Err(Error::validation("scenario has no agents"));
    }
    let cfg = CalibrationConfig::new(scenario.alpha)?;
    let samples = scenario
        .agents
        .iter()
        .enumerate()
        .map(|(k, (dist, n))| {
            let mut rng = seeded(seed, k as u64);
            ScoreSample::new((0..*n).map(|_| dist.sample(&mut rng)).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let summaries: Vec<_> = samples.iter().enumerate().map(|(k, s)| local_threshold(k, s, &cfg)).collect();
    let q_hat = weighted_average(&summaries)?.q_hat;
    let q_hat_mix = pooled_scores_threshold(&samples, &cfg)?.q_hat;
    let nominal = 1.0 - scenario.alpha;
    let cov = exact_coverage(&scenario.test, q_hat);
    let cov_mix = exact_coverage(&scenario.test, q_hat_mix);
    let total_gap = (cov - nominal).abs();
    let shift_term = (cov_mix - nominal).abs();
    let agg_term = (cov - cov_mix).abs();
    let n: usize = samples.iter().map(ScoreSample::len).sum();
    let r = empirical_quantile_index(n, scenario.alpha).rank.min(n) as f64;
    let n1 = n as f64 + 1.0;
    let slack = MC_SLACK_SE * (r * (n1 - r) / (n1 * n1 * (n1 + 1.0))).sqrt();
    Ok(Decomposition {
        q_hat,
        q_hat_mix,
        total_gap,
        shift_term,
        agg_term,
        slack,
        triangle_holds: total_gap <= shift_term + agg_term + slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_components_give_zero_bound() {
        let g = AnalyticDistribution::gaussian(0.0, 1.0).unwrap();
        let mix = MixtureSpec::new(vec![(g.clone(), 1.0), (g, 2.0)]).unwrap();
        let input = StabilityBoundInput::tightest(mix, 0.1).unwrap();
        let BoundCheck::Checked { holds, lhs, rhs } = check_stability_bound(&input).unwrap() else {
            panic!("skipped");
        };
        assert!(holds && lhs < 1e-9 && rhs == 0.0);
    }

    #[test]
    fn two_gaussian_fixture() {
        let mix = MixtureSpec::new(vec![
            (AnalyticDistribution::gaussian(0.0, 1.0).unwrap(), 1.0),
            (AnalyticDistribution::gaussian(0.3, 1.0).unwrap(), 1.0),
        ])
        .unwrap();
        let input = StabilityBoundInput::new(mix, 0.1, 1.0).unwrap();
        let BoundCheck::Checked { holds, lhs, rhs } = check_stability_bound(&input).unwrap() else {
            panic!("skipped");
        };
        // Fixture from an independent stdlib-normal computation.
        assert!(holds);
        assert!((input.q_mix - 1.4459601793885126).abs() < 1e-8);
        assert!((lhs - 0.0144086138439119).abs() < 1e-8, "lhs = {lhs}");
        assert!((input.c - 0.02996461789642788).abs() < 1e-9);
        assert!((input.l - 0.39471522629026057).abs() < 1e-9);
        assert!((rhs - 1.975906522425479).abs() < 1e-6, "rhs = {rhs}");
        assert!(input.c <= input.l);
    }

    #[test]
    fn narrow_window_is_skipped() {
        let mix = MixtureSpec::new(vec![
            (AnalyticDistribution::gaussian(0.0, 1.0).unwrap(), 1.0),
            (AnalyticDistribution::gaussian(2.0, 1.0).unwrap(), 1.0),
        ])
        .unwrap();
        let input = StabilityBoundInput::new(mix, 0.1, 0.1).unwrap();
        assert!(matches!(check_stability_bound(&input).unwrap(), BoundCheck::Skipped { .. }));
    }

    #[test]
    fn rejects_discrete_and_bad_windows() {
        let d = AnalyticDistribution::discrete(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let mix = MixtureSpec::new(vec![(d, 1.0)]).unwrap();
        assert!(StabilityBoundInput::new(mix, 0.1, 1.0).is_err());
        let g = MixtureSpec::new(vec![(AnalyticDistribution::gaussian(0.0, 1.0).unwrap(), 1.0)]).unwrap();
        assert!(StabilityBoundInput::new(g, 0.1, 0.0).is_err());
    }

    #[test]
    fn zero_tv_case_sits_near_nominal() {
        let target = uniform_block(1000, 0, 1000).unwrap();
        let r = check_oracle_shift_bound(&[(target.clone(), 400)], &target, 0.05, 500, 3).unwrap();
        assert!(r.holds);
        assert!((r.rhs - 1.0 / 401.0).abs() < 1e-12);
    }

    #[test]
    fn shift_bound_rejects_mismatched_supports() {
        let a = uniform_block(10, 0, 10).unwrap();
        let b = AnalyticDistribution::discrete(grid_support(11), vec![1.0 / 11.0; 11]).unwrap();
        assert!(check_oracle_shift_bound(&[(b, 10)], &a, 0.1, 10, 0).is_err());
        let g = AnalyticDistribution::gaussian(0.0, 1.0).unwrap();
        assert!(check_oracle_shift_bound(&[(a.clone(), 10)], &g, 0.1, 10, 0).is_err());
    }

    #[test]
    fn block_tv_is_exact() {
        let t = uniform_block(1000, 0, 1000).unwrap();
        let tv = tv_distance(&uniform_block(1000, 100, 1000).unwrap(), &t).unwrap();
        assert!((tv - 0.1).abs() < 1e-12);
    }

    #[test]
    fn decomposition_examples() {
        let d = decomposition_audit(&DecompositionScenario::heterogeneous_two_agent(), 1).unwrap();
        assert!(d.triangle_holds);
        assert!(d.total_gap <= d.shift_term + d.agg_term + 1e-15);
        let same = decomposition_audit(&DecompositionScenario::identical_agents(), 2).unwrap();
        assert!(same.agg_term <= same.slack);
        let zero = decomposition_audit(&DecompositionScenario::zero_shift(), 3).unwrap();
        assert!(zero.triangle_holds);
        assert!(zero.shift_term <= 1.0 / 1001.0 + zero.slack);
    }
}
