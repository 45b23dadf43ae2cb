//! Seeded fixtures shared by the benchmarks.

use fedwq::calibration::{LocalQuantileSummary, ScoreSample};
use fedwq::rng::seeded;
use fedwq::Threshold;
use rand::Rng;

/// `n` uniform scores in `[0, 1)`.
pub fn uniform_scores(n: usize, seed: u64) -> ScoreSample {
    let mut rng = seeded(seed, 0);
    ScoreSample::new((0..n).map(|_| rng.random::<f64>()).collect()).expect("finite scores")
}

/// `m` summaries with random thresholds and sizes in `[50, 5000)`.
pub fn summaries(m: usize, seed: u64) -> Vec<LocalQuantileSummary> {
    let mut rng = seeded(seed, 1);
    (0..m)
        .map(|k| {
            let q = Threshold::new(rng.random::<f64>()).expect("finite threshold");
            LocalQuantileSummary::new(k, q, rng.random_range(50..5000)).expect("positive size")
        })
        .collect()
}
