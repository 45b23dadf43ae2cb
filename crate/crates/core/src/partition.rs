//! Heterogeneous calibration splits.
//!
//! The global pool is split once into training and calibration parts. The
//! calibration part is then distributed over agents with per-group
//! proportions drawn from a symmetric Dirichlet: groups are classes for
//! label skew, or K-means bins of the features for covariate shift.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    /// One index list per agent, into the calibration pool.
    pub assignments: Vec<Vec<usize>>,
    pub beta: f64,
    pub seed: u64,
    /// K-means bin count for covariate partitions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
}

impl PartitionPlan {
    pub fn agent_count(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    /// Checks that the lists are pairwise disjoint and cover `0..pool_size`.
    pub fn verify(&self, pool_size: usize) -> Result<()> {
        let mut seen = vec![false; pool_size];
        for idx in self.assignments.iter().flatten() {
            match seen.get_mut(*idx) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::validation(format!("index {idx} assigned twice"))),
                None => return Err(Error::Index { index: *idx, len: pool_size }),
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("index {missing} not assigned")));
        }
        Ok(())
    }
}

/// Random disjoint split into `(train, calibration)`; the calibration size is
/// `round(n · cal_fraction)` kept inside `[1, n − 1]`.
pub fn train_cal_split(data: &Dataset, cal_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(Error::validation(format!("cal_fraction {cal_fraction} outside (0, 1)")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::validation(format!("cannot split a dataset of {n} samples")));
    }
    let n_cal = ((n as f64 * cal_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, 0x5117));
    let (cal, train) = order.split_at(n_cal);
    let mut train = train.to_vec();
    let mut cal = cal.to_vec();
    train.sort_unstable();
    cal.sort_unstable();
    Ok((data.subset(&train), data.subset(&cal)))
}

/// One draw from a symmetric `Dirichlet(beta · 1_m)` via normalized
/// `Gamma(beta, 1)` variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, beta: f64, m: usize) -> Result<Vec<f64>> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::validation(format!("Dirichlet concentration {beta} must be positive")));
    }
    if m == 0 {
        return Err(Error::validation("Dirichlet dimension must be at least 1"));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::validation(e.to_string()))?;
    let draws: Vec<f64> = (0..m).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        return Ok(draws.into_iter().map(|g| g / total).collect());
    }
    // Every gamma draw underflowed: the limit is a vertex of the simplex.
    let mut vertex = vec![0.0; m];
    vertex[rng.random_range(0..m)] = 1.0;
    Ok(vertex)
}

/// Integer counts summing to `total`, proportional to `props`, using the
/// largest-remainder rule (ties go to the lower agent index).
pub(crate) fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Splits each group across `m` agents with fresh Dirichlet proportions.
fn dirichlet_over_groups(groups: &[usize], n_groups: usize, m: usize, beta: f64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::validation("agent count must be at least 1"));
    }
    let mut rng = seeded(seed, 0xD112);
    let mut by_group: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        by_group[g].push(i);
    }
    let mut assignments = vec![Vec::new(); m];
    for mut members in by_group {
        let props = sample_dirichlet(&mut rng, beta, m)?;
        members.shuffle(&mut rng);
        let counts = largest_remainder(&props, members.len());
        let mut rest = members.as_slice();
        for (agent, count) in counts.into_iter().enumerate() {
            let (take, tail) = rest.split_at(count);
            assignments[agent].extend_from_slice(take);
            rest = tail;
        }
    }
    for list in &mut assignments {
        list.sort_unstable();
    }
    Ok(assignments)
}

/// Label-skew partition of a classification calibration pool.
pub fn dirichlet_label_partition(cal: &Dataset, m: usize, beta: f64, seed: u64) -> Result<PartitionPlan> {
    let Task::Classification { num_classes } = cal.task() else {
        return Err(Error::TaskMismatch { expected: "classification", found: "regression" });
    };
    let assignments = dirichlet_over_groups(cal.labels()?, num_classes, m, beta, seed)?;
    Ok(PartitionPlan { assignments, beta, seed, bins: None })
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

/// Lloyd's K-means with seeded k-means++ initialization. Empty bins are
/// reseeded at the point farthest from its current centroid.
pub fn kmeans_bins(features: &[Vec<f64>], bins: usize, seed: u64, max_iters: usize) -> Result<Vec<usize>> {
    if bins == 0 {
        return Err(Error::validation("bin count must be at least 1"));
    }
    if features.len() < bins {
        return Err(Error::validation(format!("{} samples cannot fill {bins} bins", features.len())));
    }
    let mut rng = seeded(seed, 0x4EA5);
    let mut centroids = vec![features[rng.random_range(0..features.len())].clone()];
    let mut d2: Vec<f64> = features.iter().map(|x| squared_distance(x, &centroids[0])).collect();
    while centroids.len() < bins {
        let total: f64 = d2.iter().sum();
        // All remaining points coincide with a centroid; any pick is equivalent.
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).expect("positive total"))
        } else {
            rng.random_range(0..features.len())
        };
        centroids.push(features[next].clone());
        for (d, x) in d2.iter_mut().zip(features) {
            *d = d.min(squared_distance(x, &features[next]));
        }
    }
    let mut assign: Vec<usize> = features.iter().map(|x| nearest(&centroids, x)).collect();
    for _ in 0..max_iters.max(1) {
        repair_empty_bins(features, &mut centroids, &mut assign);
        // update step
        let dim = features[0].len();
        let mut sums = vec![vec![0.0; dim]; bins];
        let mut counts = vec![0usize; bins];
        for (x, &k) in features.iter().zip(&assign) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..bins {
            if counts[k] > 0 {
                centroids[k] = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            }
        }
        let next: Vec<usize> = features.iter().map(|x| nearest(&centroids, x)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    repair_empty_bins(features, &mut centroids, &mut assign);
    Ok(assign)
}

fn repair_empty_bins(features: &[Vec<f64>], centroids: &mut [Vec<f64>], assign: &mut [usize]) {
    loop {
        let mut counts = vec![0usize; centroids.len()];
        for &k in assign.iter() {
            counts[k] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // farthest point among those whose bin can spare one
        let far = (0..features.len())
            .filter(|&i| counts[assign[i]] > 1)
            .max_by(|&a, &b| {
                let da = squared_distance(&features[a], &centroids[assign[a]]);
                let db = squared_distance(&features[b], &centroids[assign[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            })
            .expect("more samples than bins");
        centroids[empty] = features[far].clone();
        assign[far] = empty;
    }
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Covariate-shift partition of a regression calibration pool: K-means bins
/// of the features, then a Dirichlet split per bin.
pub fn dirichlet_covariate_partition(
    cal: &Dataset,
    m: usize,
    beta: f64,
    bins: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    if cal.task() != Task::Regression {
        return Err(Error::TaskMismatch { expected: "regression", found: "classification" });
    }
    let groups = kmeans_bins(cal.features(), bins, seed, KMEANS_MAX_ITERS)?;
    let assignments = dirichlet_over_groups(&groups, bins, m, beta, seed)?;
    Ok(PartitionPlan { assignments, beta, seed, bins: Some(bins) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SyntheticClassification, SyntheticRegression, Targets};
    use proptest::prelude::*;

    fn classification(n_per_class: usize, classes: usize) -> Dataset {
        let labels: Vec<usize> = (0..classes).flat_map(|c| std::iter::repeat_n(c, n_per_class)).collect();
        let features = labels.iter().map(|&c| vec![c as f64]).collect();
        Dataset::new(features, Targets::Classes { labels, num_classes: classes }).unwrap()
    }

    fn regression(n: usize) -> Dataset {
        SyntheticRegression { pool_size: n, test_size: 1, ..Default::default() }.sample(1, 1, n).unwrap()
    }

    #[test]
    fn split_sizes() {
        let d = regression(100);
        let (train, cal) = train_cal_split(&d, 0.3, 1).unwrap();
        assert_eq!((train.len(), cal.len()), (70, 30));
        let d2 = regression(2);
        let (train, cal) = train_cal_split(&d2, 0.5, 1).unwrap();
        assert_eq!((train.len(), cal.len()), (1, 1));
        assert!(train_cal_split(&regression(1), 0.5, 1).is_err());
        assert!(train_cal_split(&d, 1.0, 1).is_err());
        assert_eq!(train_cal_split(&d, 0.3, 9).unwrap(), train_cal_split(&d, 0.3, 9).unwrap());
    }

    #[test]
    fn split_is_disjoint() {
        let values: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let d = Dataset::new(values.iter().map(|&v| vec![v]).collect(), Targets::Values(values)).unwrap();
        let (train, cal) = train_cal_split(&d, 0.3, 5).unwrap();
        let mut all: Vec<f64> = train.values().unwrap().iter().chain(cal.values().unwrap()).copied().collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..50).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn largest_remainder_preserves_total() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[1.0], 7), vec![7]);
    }

    #[test]
    fn single_agent_takes_everything() {
        let d = classification(20, 3);
        let plan = dirichlet_label_partition(&d, 1, 0.3, 2).unwrap();
        assert_eq!(plan.assignments, vec![(0..60).collect::<Vec<_>>()]);
        let r = regression(40);
        let plan = dirichlet_covariate_partition(&r, 1, 0.3, 5, 2).unwrap();
        assert_eq!(plan.assignments[0].len(), 40);
    }

    #[test]
    fn task_mismatch() {
        assert!(matches!(dirichlet_label_partition(&regression(10), 2, 0.3, 1), Err(Error::TaskMismatch { .. })));
        assert!(matches!(
            dirichlet_covariate_partition(&classification(5, 2), 2, 0.3, 2, 1),
            Err(Error::TaskMismatch { .. })
        ));
    }

    fn class_counts(d: &Dataset, plan: &PartitionPlan, classes: usize) -> Vec<Vec<usize>> {
        let labels = d.labels().unwrap();
        plan.assignments
            .iter()
            .map(|a| {
                let mut h = vec![0; classes];
                for &i in a {
                    h[labels[i]] += 1;
                }
                h
            })
            .collect()
    }

    #[test]
    fn huge_beta_is_near_uniform() {
        let d = classification(600, 10);
        for seed in 0..20 {
            let plan = dirichlet_label_partition(&d, 6, 1e6, seed).unwrap();
            plan.verify(d.len()).unwrap();
            for agent in class_counts(&d, &plan, 10) {
                for c in agent {
                    assert!((c as f64 - 100.0).abs() <= 10.0, "count {c}");
                }
            }
        }
    }

    fn mean_tv_from_uniform(d: &Dataset, beta: f64) -> f64 {
        let mut total = 0.0;
        let mut count = 0.0;
        for seed in 0..20 {
            let plan = dirichlet_label_partition(d, 6, beta, seed).unwrap();
            for h in class_counts(d, &plan, 10) {
                let n: usize = h.iter().sum();
                if n == 0 {
                    continue;
                }
                total += 0.5 * h.iter().map(|&c| (c as f64 / n as f64 - 0.1).abs()).sum::<f64>();
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn smaller_beta_means_more_skew() {
        let d = classification(600, 10);
        assert!(mean_tv_from_uniform(&d, 0.3) > mean_tv_from_uniform(&d, 10.0));
    }

    #[test]
    fn dirichlet_marginal_mean() {
        let mut rng = seeded(3, 3);
        for beta in [0.3, 1.0, 5.0] {
            let m = 6;
            let mut sums = vec![0.0; m];
            for _ in 0..10_000 {
                for (s, w) in sums.iter_mut().zip(sample_dirichlet(&mut rng, beta, m).unwrap()) {
                    *s += w;
                }
            }
            for s in sums {
                assert!((s / 10_000.0 - 1.0 / m as f64).abs() < 0.01, "beta {beta}");
            }
        }
        assert!(sample_dirichlet(&mut rng, 0.0, 3).is_err());
    }

    #[test]
    fn kmeans_examples() {
        let g = SyntheticClassification { num_classes: 2, dim: 3, ..Default::default() };
        let d = g.sample(1, 1, 30).unwrap();
        assert!(kmeans_bins(d.features(), 1, 0, 10).unwrap().iter().all(|&b| b == 0));
        assert!(kmeans_bins(&d.features()[..2], 3, 0, 10).is_err());

        // two clouds far apart relative to their diameter
        let mut pts = Vec::new();
        for i in 0..20 {
            let j = i as f64 * 0.01;
            pts.push(vec![j, -j]);
            pts.push(vec![100.0 + j, 100.0 - j]);
        }
        for seed in 0..10 {
            let bins = kmeans_bins(&pts, 2, seed, 100).unwrap();
            for pair in bins.chunks(2) {
                assert_ne!(pair[0], pair[1]);
            }
            let first = bins[0];
            assert!(bins.iter().step_by(2).all(|&b| b == first));
            assert_eq!(bins, kmeans_bins(&pts, 2, seed, 100).unwrap());
        }
    }

    #[test]
    fn kmeans_bins_never_empty() {
        // duplicate points force empty bins after the first assignment
        let mut pts = vec![vec![0.0, 0.0]; 10];
        pts.push(vec![5.0, 5.0]);
        pts.push(vec![6.0, 5.0]);
        for seed in 0..20 {
            let bins = kmeans_bins(&pts, 4, seed, 50).unwrap();
            for b in 0..4 {
                assert!(bins.contains(&b), "seed {seed} bin {b} empty: {bins:?}");
            }
        }
    }

    #[test]
    fn covariate_partition_near_uniform_for_huge_beta() {
        let d = regression(3000);
        let bins = kmeans_bins(d.features(), 5, 4, KMEANS_MAX_ITERS).unwrap();
        let plan = dirichlet_covariate_partition(&d, 6, 1e6, 5, 4).unwrap();
        plan.verify(d.len()).unwrap();
        let mut bin_sizes = [0usize; 5];
        for &b in &bins {
            bin_sizes[b] += 1;
        }
        for a in &plan.assignments {
            let mut h = [0usize; 5];
            for &i in a {
                h[bins[i]] += 1;
            }
            for b in 0..5 {
                let expected = bin_sizes[b] as f64 / 6.0;
                assert!((h[b] as f64 - expected).abs() <= 0.1 * expected + 1.0);
            }
        }
        // one bin degenerates to a single split of the pool
        let one = dirichlet_covariate_partition(&d, 3, 0.5, 1, 4).unwrap();
        one.verify(d.len()).unwrap();
    }

    proptest! {
        #[test]
        fn label_partition_is_a_partition(n in 1usize..40, classes in 2usize..6, m in 1usize..8, beta in 0.05f64..20.0, seed in any::<u64>()) {
            let d = classification(n, classes);
            let plan = dirichlet_label_partition(&d, m, beta, seed).unwrap();
            prop_assert_eq!(plan.agent_count(), m);
            prop_assert!(plan.verify(d.len()).is_ok());
            prop_assert_eq!(plan.clone(), dirichlet_label_partition(&d, m, beta, seed).unwrap());
        }

        #[test]
        fn covariate_partition_is_a_partition(n in 5usize..80, m in 1usize..7, bins in 1usize..5, seed in any::<u64>()) {
            let d = regression(n);
            let plan = dirichlet_covariate_partition(&d, m, 0.3, bins, seed).unwrap();
            prop_assert!(plan.verify(d.len()).is_ok());
        }
    }
}
