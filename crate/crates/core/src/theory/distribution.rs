//! Score distributions with exact CDFs, densities and quantiles.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Absolute tolerance of every bisection quantile.
pub const BISECTION_TOL: f64 = 1e-10;
const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalyticDistribution {
    Gaussian {
        mu: f64,
        sigma: f64,
    },
    Uniform {
        a: f64,
        b: f64,
    },
    /// Strictly increasing `support` with matching `probs`.
    Discrete {
        support: Vec<f64>,
        probs: Vec<f64>,
    },
}

fn check_p(p: f64) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::validation(format!("probability level {p} outside (0, 1)")))
    }
}

/// Smallest `v` in `[lo, hi]` with `cdf(v) ≥ p`, to [`BISECTION_TOL`].
pub(crate) fn bisect(cdf: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) >= p {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

impl AnalyticDistribution {
    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) {
            return Err(Error::validation(format!("invalid Gaussian({mu}, {sigma})")));
        }
        Ok(AnalyticDistribution::Gaussian { mu, sigma })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && a < b) {
            return Err(Error::validation(format!("invalid Uniform({a}, {b})")));
        }
        Ok(AnalyticDistribution::Uniform { a, b })
    }

    pub fn discrete(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(Error::validation("discrete support and probs must be non-empty and equal length"));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) || support.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("discrete support must be finite and strictly increasing"));
        }
        if probs.iter().any(|&p| !(p.is_finite() && p >= 0.0)) {
            return Err(Error::validation("discrete probabilities must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::validation(format!("discrete probabilities sum to {total}")));
        }
        Ok(AnalyticDistribution::Discrete { support, probs })
    }

    pub fn cdf(&self, v: f64) -> f64 {
        match self {
            AnalyticDistribution::Gaussian { mu, sigma } => 0.5 * erfc(-(v - mu) / (sigma * std::f64::consts::SQRT_2)),
            AnalyticDistribution::Uniform { a, b } => ((v - a) / (b - a)).clamp(0.0, 1.0),
            AnalyticDistribution::Discrete { support, probs } => {
                let k = support.partition_point(|&s| s <= v);
                probs[..k].iter().sum::<f64>().min(1.0)
            }
        }
    }

    /// Density of continuous kinds; `None` for discrete.
    pub fn pdf(&self, v: f64) -> Option<f64> {
        match self {
            AnalyticDistribution::Gaussian { mu, sigma } => {
                let z = (v - mu) / sigma;
                Some((-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
            }
            AnalyticDistribution::Uniform { a, b } => Some(if (*a..=*b).contains(&v) { 1.0 / (b - a) } else { 0.0 }),
            AnalyticDistribution::Discrete { .. } => None,
        }
    }

    /// Interval holding all mass that bisection needs to search.
    pub(crate) fn bracket(&self) -> (f64, f64) {
        match self {
            AnalyticDistribution::Gaussian { mu, sigma } => (mu - 10.0 * sigma, mu + 10.0 * sigma),
            AnalyticDistribution::Uniform { a, b } => (*a, *b),
            AnalyticDistribution::Discrete { support, .. } => (support[0], support[support.len() - 1]),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            AnalyticDistribution::Gaussian { mu, sigma } => {
                Normal::new(*mu, *sigma).expect("validated parameters").sample(rng)
            }
            AnalyticDistribution::Uniform { a, b } => rng.random_range(*a..*b),
            AnalyticDistribution::Discrete { support, .. } => support[self.sample_index(rng)],
        }
    }

    /// Index of a discrete draw by inverse transform.
    pub(crate) fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let AnalyticDistribution::Discrete { probs, .. } = self else {
            panic!("sample_index on a continuous distribution");
        };
        let mut u = rng.random::<f64>();
        for (i, &p) in probs.iter().enumerate() {
            if u < p {
                return i;
            }
            u -= p;
        }
        probs.iter().rposition(|&p| p > 0.0).expect("probabilities sum to one")
    }
}

/// Exact inverse CDF: closed form for Uniform, the generalized inverse for
/// Discrete, bisection on `[μ − 10σ, μ + 10σ]` for Gaussian.
pub fn population_quantile(dist: &AnalyticDistribution, p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(match dist {
        AnalyticDistribution::Uniform { a, b } => a + p * (b - a),
        AnalyticDistribution::Discrete { support, probs } => {
            let mut cum = 0.0;
            let mut at = support.len() - 1;
            for (i, &q) in probs.iter().enumerate() {
                cum += q;
                if cum >= p - 1e-12 {
                    at = i;
                    break;
                }
            }
            support[at]
        }
        AnalyticDistribution::Gaussian { .. } => {
            let (lo, hi) = dist.bracket();
            bisect(|v| dist.cdf(v), p, lo, hi)
        }
    })
}

/// Components with positive sample-size weights `n_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    components: Vec<(AnalyticDistribution, f64)>,
}

impl MixtureSpec {
    pub fn new(components: Vec<(AnalyticDistribution, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::validation("mixture needs at least one component"));
        }
        if components.iter().any(|(_, w)| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::validation("mixture weights must be positive"));
        }
        Ok(MixtureSpec { components })
    }

    pub fn components(&self) -> &[(AnalyticDistribution, f64)] {
        &self.components
    }

    /// `n_k / N`.
    pub fn weights(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|(_, w)| w).sum();
        self.components.iter().map(|(_, w)| w / total).collect()
    }

    pub fn cdf(&self, v: f64) -> f64 {
        self.components.iter().zip(self.weights()).map(|((d, _), w)| w * d.cdf(v)).sum()
    }

    pub fn pdf(&self, v: f64) -> Option<f64> {
        self.components.iter().zip(self.weights()).map(|((d, _), w)| d.pdf(v).map(|f| w * f)).sum()
    }

    /// `Σ (n_k / N) q_k` with `q_k` the population quantiles.
    pub fn average_quantile(&self, p: f64) -> Result<f64> {
        let mut acc = 0.0;
        for ((d, _), w) in self.components.iter().zip(self.weights()) {
            acc += w * population_quantile(d, p)?;
        }
        Ok(acc)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let weights = self.weights();
        let mut u = rng.random::<f64>();
        for ((d, _), w) in self.components.iter().zip(&weights) {
            if u < *w {
                return d.sample(rng);
            }
            u -= w;
        }
        self.components[self.components.len() - 1].0.sample(rng)
    }
}

/// `F_mix^{-1}(p)` by bisection on the weighted CDF; exact generalized
/// inverse when every component is discrete.
pub fn mixture_quantile_population(mix: &MixtureSpec, p: f64) -> Result<f64> {
    check_p(p)?;
    let all_discrete = mix.components.iter().all(|(d, _)| matches!(d, AnalyticDistribution::Discrete { .. }));
    if all_discrete {
        let mut atoms: Vec<f64> = mix
            .components
            .iter()
            .flat_map(|(d, _)| match d {
                AnalyticDistribution::Discrete { support, .. } => support.clone(),
                _ => unreachable!(),
            })
            .collect();
        atoms.sort_by(f64::total_cmp);
        atoms.dedup();
        let at = atoms.iter().position(|&a| mix.cdf(a) >= p - 1e-12).unwrap_or(atoms.len() - 1);
        return Ok(atoms[at]);
    }
    let lo = mix.components.iter().map(|(d, _)| d.bracket().0).fold(f64::INFINITY, f64::min);
    let hi = mix.components.iter().map(|(d, _)| d.bracket().1).fold(f64::NEG_INFINITY, f64::max);
    Ok(bisect(|v| mix.cdf(v), p, lo, hi))
}

/// `½ Σ |p − q|` over a shared support.
pub fn tv_distance(p: &AnalyticDistribution, q: &AnalyticDistribution) -> Result<f64> {
    match (p, q) {
        (
            AnalyticDistribution::Discrete { support: sp, probs: pp },
            AnalyticDistribution::Discrete { support: sq, probs: pq },
        ) if sp == sq => Ok(0.5 * pp.iter().zip(pq).map(|(a, b)| (a - b).abs()).sum::<f64>()),
        (AnalyticDistribution::Discrete { .. }, AnalyticDistribution::Discrete { .. }) => {
            Err(Error::validation("total variation needs a common support"))
        }
        _ => Err(Error::validation("exact total variation needs discrete distributions")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Φ by its Taylor series, independent of the erfc used above.
    fn series_normal_cdf(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / 2.0 / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 + sum / (2.0 * std::f64::consts::PI).sqrt()
    }

    fn series_quantile(p: f64) -> f64 {
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if series_normal_cdf(mid) >= p {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }

    #[test]
    fn quantile_examples() {
        let u = AnalyticDistribution::uniform(0.0, 1.0).unwrap();
        assert!((population_quantile(&u, 0.95).unwrap() - 0.95).abs() < 1e-15);
        let g = AnalyticDistribution::gaussian(0.0, 1.0).unwrap();
        assert!(population_quantile(&g, 0.5).unwrap().abs() < 1e-9);
        let q = population_quantile(&g, 0.95).unwrap();
        assert!((q - 1.6449).abs() < 1e-3);
        assert!((q - series_quantile(0.95)).abs() < 1e-8);
        assert!(population_quantile(&g, 0.0).is_err());
        assert!(population_quantile(&g, 1.0).is_err());
        let d = AnalyticDistribution::discrete(vec![1.0, 2.0, 3.0], vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(population_quantile(&d, 0.2).unwrap(), 1.0);
        assert_eq!(population_quantile(&d, 0.21).unwrap(), 2.0);
        assert_eq!(population_quantile(&d, 0.99).unwrap(), 3.0);
    }

    #[test]
    fn mixture_quantile_examples() {
        let g = AnalyticDistribution::gaussian(0.3, 2.0).unwrap();
        let single = MixtureSpec::new(vec![(g.clone(), 5.0)]).unwrap();
        let direct = population_quantile(&g, 0.9).unwrap();
        assert!((mixture_quantile_population(&single, 0.9).unwrap() - direct).abs() < 1e-9);
        let twin = MixtureSpec::new(vec![(g.clone(), 1.0), (g, 3.0)]).unwrap();
        assert!((mixture_quantile_population(&twin, 0.9).unwrap() - direct).abs() < 1e-9);
        let halves = MixtureSpec::new(vec![
            (AnalyticDistribution::uniform(0.0, 1.0).unwrap(), 1.0),
            (AnalyticDistribution::uniform(1.0, 2.0).unwrap(), 1.0),
        ])
        .unwrap();
        assert_eq!(halves.cdf(1.0), 0.5);
        assert!((mixture_quantile_population(&halves, 0.5).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constructors_validate() {
        assert!(AnalyticDistribution::gaussian(0.0, 0.0).is_err());
        assert!(AnalyticDistribution::uniform(1.0, 1.0).is_err());
        assert!(AnalyticDistribution::discrete(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(AnalyticDistribution::discrete(vec![1.0, 2.0], vec![0.5, 0.4]).is_err());
        assert!(MixtureSpec::new(vec![]).is_err());
        assert!(MixtureSpec::new(vec![(AnalyticDistribution::uniform(0.0, 1.0).unwrap(), 0.0)]).is_err());
    }

    #[test]
    fn tv_examples() {
        let a = AnalyticDistribution::discrete(vec![0.0, 1.0], vec![1.0, 0.0]).unwrap();
        let b = AnalyticDistribution::discrete(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(tv_distance(&a, &b).unwrap(), 1.0);
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        let c = AnalyticDistribution::discrete(vec![0.0, 2.0], vec![1.0, 0.0]).unwrap();
        assert!(tv_distance(&a, &c).is_err());
        assert!(tv_distance(&a, &AnalyticDistribution::uniform(0.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn sampling_matches_cdf() {
        let mut rng = crate::rng::seeded(1, 0);
        let g = AnalyticDistribution::gaussian(1.0, 2.0).unwrap();
        let n = 20_000;
        let below = (0..n).filter(|_| g.sample(&mut rng) <= 2.0).count() as f64 / n as f64;
        assert!((below - g.cdf(2.0)).abs() < 0.015);
        let d = AnalyticDistribution::discrete(vec![0.0, 1.0, 2.0], vec![0.1, 0.6, 0.3]).unwrap();
        let ones = (0..n).filter(|_| d.sample(&mut rng) == 1.0).count() as f64 / n as f64;
        assert!((ones - 0.6).abs() < 0.015);
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn cdf_inverse_round_trip(mu in -3.0f64..3.0, sigma in 0.2f64..3.0, a in -2.0f64..2.0, w in 0.1f64..4.0) {
            let dists = [
                AnalyticDistribution::gaussian(mu, sigma).unwrap(),
                AnalyticDistribution::uniform(a, a + w).unwrap(),
            ];
            for d in &dists {
                for i in 1..100 {
                    let p = i as f64 / 100.0;
                    let v = population_quantile(d, p).unwrap();
                    prop_assert!((d.cdf(v) - p).abs() <= 1e-8);
                }
            }
        }

        #[test]
        fn tv_is_a_metric_on_common_support(p in simplex(6), q in simplex(6)) {
            let support: Vec<f64> = (0..6).map(f64::from).collect();
            let p = AnalyticDistribution::discrete(support.clone(), p).unwrap();
            let q = AnalyticDistribution::discrete(support, q).unwrap();
            let pq = tv_distance(&p, &q).unwrap();
            prop_assert_eq!(pq, tv_distance(&q, &p).unwrap());
            prop_assert!((0.0..=1.0).contains(&pq));
            prop_assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
            prop_assert_eq!(pq == 0.0, p == q);
        }
    }
}
