//! Coverage gap across a (β, n) grid of the full pipeline.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::AggregationMethod;
use crate::error::{Error, Result};
use crate::experiment::{agent_scores, calibrate_agents, partition_calibration, prepare_seed, ExperimentConfig};
use crate::threshold::Threshold;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendCell {
    pub beta: f64,
    /// Mean calibration points per agent; the reservoir holds `n · M`.
    pub n: usize,
    /// Global coverage per seed, in seed order.
    pub coverages: Vec<f64>,
    pub mean_coverage: f64,
    /// `|mean_coverage − (1 − α)|`.
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendTable {
    pub alpha: f64,
    pub method: AggregationMethod,
    /// Row-major over `beta_grid × n_grid`.
    pub cells: Vec<TrendCell>,
    /// Gap at the largest cell ≤ gap at the smallest cell.
    pub endpoint_holds: bool,
}

impl TrendTable {
    pub fn cell(&self, beta: f64, n: usize) -> Option<&TrendCell> {
        self.cells.iter().find(|c| c.beta == beta && c.n == n)
    }
}

fn strictly_increasing<T: PartialOrd>(grid: &[T]) -> bool {
    !grid.is_empty() && grid.windows(2).all(|w| w[0] < w[1])
}

/// Stream offset for the calibration reservoir of cell `i`; clear of the
/// pool and test streams.
const RESERVOIR_STREAM: u64 = 1000;

/// For each seed, trains the models of `base` once, then per cell draws a
/// fresh calibration reservoir of `n · M` points, partitions it with
/// `Dir(β)`, runs one round of `base.methods[0]` and evaluates on the
/// shared test set.
pub fn asymptotic_trend(
    beta_grid: &[f64],
    n_grid: &[usize],
    base: &ExperimentConfig,
    seeds: &[u64],
) -> Result<TrendTable> {
    base.validate()?;
    if !strictly_increasing(beta_grid) || !strictly_increasing(n_grid) {
        return Err(Error::validation("trend grids must be non-empty and strictly increasing"));
    }
    if n_grid[0] == 0 || seeds.is_empty() {
        return Err(Error::validation("trend needs positive n and at least one seed"));
    }
    let method = base.methods[0];
    let cells: Vec<(f64, usize)> = beta_grid.iter().flat_map(|&b| n_grid.iter().map(move |&n| (b, n))).collect();
    let per_seed: Vec<Vec<f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let models = prepare_seed(base, seed)?;
            cells
                .iter()
                .enumerate()
                .map(|(i, &(beta, n))| {
                    let raw = base.dataset.fresh_sample(seed, RESERVOIR_STREAM + i as u64, n * base.agents)?;
                    let cal = models.standardizer.transform(&raw);
                    let plan = partition_calibration(&cal, base, beta, seed ^ (i as u64) << 32)?;
                    let scores = agent_scores(&models, &cal, &plan)?;
                    let round = format!("trend-{seed}-{i}");
                    let (thresholds, _) = calibrate_agents(&scores, method, base.alpha, &round, false)?;
                    Ok(global_coverage(&models.test, &thresholds))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let nominal = 1.0 - base.alpha;
    let cells: Vec<TrendCell> = cells
        .iter()
        .enumerate()
        .map(|(i, &(beta, n))| {
            let coverages: Vec<f64> = per_seed.iter().map(|s| s[i]).collect();
            let mean_coverage = coverages.iter().sum::<f64>() / coverages.len() as f64;
            TrendCell { beta, n, coverages, mean_coverage, gap: (mean_coverage - nominal).abs() }
        })
        .collect();
    let endpoint_holds = cells[cells.len() - 1].gap <= cells[0].gap;
    Ok(TrendTable { alpha: base.alpha, method, cells, endpoint_holds })
}

fn global_coverage(test: &[crate::experiment::TestPredictions], thresholds: &[Threshold]) -> f64 {
    let per_agent: Vec<f64> = test
        .iter()
        .zip(thresholds)
        .map(|(t, &q)| {
            let records = t.records(q);
            records.iter().filter(|r| r.covered()).count() as f64 / records.len() as f64
        })
        .collect();
    per_agent.iter().sum::<f64>() / per_agent.len() as f64
}
