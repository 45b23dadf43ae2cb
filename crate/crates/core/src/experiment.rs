//! End-to-end runs: data, split, partition, training, scoring, one
//! calibration round per method, evaluation on the shared test set, and
//! persisted CSV/JSON artifacts.
//!
//! Every random stage draws from `seeded(seed, stream)`, and models are
//! trained once per seed and shared across methods, so `(config, seed)`
//! fixes every output byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregatedThreshold, AggregationMethod};
use crate::calibration::{AgentId, ScoreSample};
use crate::data::{Dataset, Standardizer, SyntheticClassification, SyntheticRegression, Task};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, seed_summary, CoverageReport, PredictionRecord, SeedSummary};
use crate::federation::{run_agent, run_round_simulated, serve, AgentCalibration, CalibrationRoundConfig};
use crate::models::{
    train_classifier, train_quantile_regressor, weak_feature_mask, AgentModelConfig, Classifier, QuantileRegressor,
    Strength, DEFAULT_STEPS_PER_EPOCH, STRONG_EPOCHS, WEAK_EPOCHS, WEAK_FEATURE_FRACTION,
};
use crate::partition::{dirichlet_covariate_partition, dirichlet_label_partition, train_cal_split, PartitionPlan};
use crate::scores::{
    aps_prediction_set, aps_score, cqr_prediction_interval, cqr_score, ProbabilityVector, QuantilePair,
};
use crate::threshold::Threshold;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const COVERAGE_CSV: &str = "coverage.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const REPORTS_JSON: &str = "reports.json";
pub const ROUNDS_JSONL: &str = "rounds.jsonl";
pub const SCORES_DIR: &str = "scores";
/// Label of the per-seed row holding unweighted means over agents.
pub const GLOBAL_ROW: &str = "global";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    SyntheticClassification(SyntheticClassification),
    SyntheticRegression(SyntheticRegression),
    /// Headered numeric CSV, target in the last column. A seeded
    /// `test_fraction` of rows becomes the global test set.
    CsvFile {
        path: PathBuf,
        task: Task,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.25
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::SyntheticClassification(SyntheticClassification::default())
    }
}

impl DatasetSpec {
    pub fn name(&self) -> String {
        match self {
            DatasetSpec::SyntheticClassification(_) => "synthetic_classification".into(),
            DatasetSpec::SyntheticRegression(_) => "synthetic_regression".into(),
            DatasetSpec::CsvFile { path, .. } => {
                path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "csv".into())
            }
        }
    }

    /// Pool (train + calibration) and global test set for `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::SyntheticClassification(g) => g.generate(seed),
            DatasetSpec::SyntheticRegression(g) => g.generate(seed),
            DatasetSpec::CsvFile { path, task, test_fraction } => {
                let all = Dataset::from_csv(path, *task)?;
                // Distinct from the train/calibration split of the same seed.
                train_cal_split(&all, *test_fraction, seed ^ 0x7E57_7E57)
            }
        }
    }

    /// `n` fresh pool draws from independent stream `stream`; synthetic only.
    pub fn fresh_sample(&self, seed: u64, stream: u64, n: usize) -> Result<Dataset> {
        match self {
            DatasetSpec::SyntheticClassification(g) => g.sample(seed, stream, n),
            DatasetSpec::SyntheticRegression(g) => g.sample(seed, stream, n),
            DatasetSpec::CsvFile { .. } => Err(Error::validation("fresh samples need a synthetic dataset")),
        }
    }
}

/// Optimization knobs turned into per-agent [`AgentModelConfig`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub learning_rate: f64,
    pub steps_per_epoch: usize,
    pub strong_epochs: usize,
    pub weak_epochs: usize,
    pub weak_feature_fraction: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            learning_rate: 0.5,
            steps_per_epoch: DEFAULT_STEPS_PER_EPOCH,
            strong_epochs: STRONG_EPOCHS,
            weak_epochs: WEAK_EPOCHS,
            weak_feature_fraction: WEAK_FEATURE_FRACTION,
        }
    }
}

impl ModelSettings {
    fn agent_config(&self, strength: Strength, alpha: f64, mask: Option<Vec<usize>>) -> AgentModelConfig {
        let base = match (strength, mask) {
            (Strength::Weak, Some(mask)) => AgentModelConfig::weak(alpha, mask),
            _ => AgentModelConfig::strong(alpha),
        };
        AgentModelConfig {
            epochs: match strength {
                Strength::Strong => self.strong_epochs,
                Strength::Weak => self.weak_epochs,
            },
            steps_per_epoch: self.steps_per_epoch,
            learning_rate: self.learning_rate,
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetSpec,
    /// `M`.
    pub agents: usize,
    pub beta: f64,
    pub alpha: f64,
    pub methods: Vec<AggregationMethod>,
    pub seeds: Vec<u64>,
    /// Agents `0..strong_agents` are strong, the rest weak.
    pub strong_agents: usize,
    pub weak_agents: usize,
    pub models: ModelSettings,
    /// Share of the pool used for calibration; the rest trains the models.
    pub cal_fraction: f64,
    /// K-means bins for covariate partitions (regression only).
    pub bins: usize,
    pub output_dir: PathBuf,
    /// Run each round over loopback TCP instead of in-process.
    pub networked: bool,
    /// Record wall time of calibration plus aggregation. Off by default
    /// because timings break byte-identical outputs.
    pub measure_runtime: bool,
    /// Persist each agent's calibration scores under [`SCORES_DIR`].
    pub save_scores: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            dataset: DatasetSpec::default(),
            agents: 6,
            beta: 0.3,
            alpha: 0.05,
            methods: vec![AggregationMethod::WeightedAverage],
            seeds: (0..10).collect(),
            strong_agents: 3,
            weak_agents: 3,
            models: ModelSettings::default(),
            cal_fraction: 0.3,
            bins: 5,
            output_dir: PathBuf::from("results"),
            networked: false,
            measure_runtime: false,
            save_scores: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::validation(msg));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return fail(format!(
                "unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.agents == 0 {
            return fail("agents must be at least 1".into());
        }
        if self.strong_agents + self.weak_agents != self.agents {
            return fail(format!(
                "strong_agents + weak_agents = {} but agents = {}",
                self.strong_agents + self.weak_agents,
                self.agents
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return fail(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return fail(format!("beta {} must be positive and finite", self.beta));
        }
        if self.methods.is_empty() {
            return fail("methods is empty".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds is empty".into());
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return fail("seeds contain duplicates".into());
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 1.0) {
            return fail(format!("cal_fraction {} outside (0, 1)", self.cal_fraction));
        }
        if self.bins == 0 {
            return fail("bins must be at least 1".into());
        }
        let m = &self.models;
        if !(m.learning_rate.is_finite() && m.learning_rate > 0.0) {
            return fail(format!("learning_rate {} must be positive", m.learning_rate));
        }
        if !(m.weak_feature_fraction > 0.0 && m.weak_feature_fraction <= 1.0) {
            return fail(format!("weak_feature_fraction {} outside (0, 1]", m.weak_feature_fraction));
        }
        if let DatasetSpec::CsvFile { test_fraction, .. } = &self.dataset {
            if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                return fail(format!("test_fraction {test_fraction} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn strength(&self, agent: AgentId) -> Strength {
        if agent < self.strong_agents {
            Strength::Strong
        } else {
            Strength::Weak
        }
    }
}

/// Trained predictor of one agent. Strong agents share one model.
#[derive(Clone, Debug)]
pub enum Predictor {
    Classifier(Arc<Classifier>),
    Quantile(Arc<QuantileRegressor>),
}

impl Predictor {
    /// Nonconformity score of every row: APS for classifiers, CQR for
    /// quantile regressors.
    pub fn scores(&self, data: &Dataset) -> Result<Vec<f64>> {
        match self {
            Predictor::Classifier(model) => {
                let labels = data.labels()?;
                data.features().iter().zip(labels).map(|(x, &y)| aps_score(&model.predict_proba(x)?, y)).collect()
            }
            Predictor::Quantile(model) => {
                let values = data.values()?;
                data.features().iter().zip(values).map(|(x, &y)| cqr_score(y, &model.predict_quantiles(x)?)).collect()
            }
        }
    }

    pub fn test_predictions(&self, test: &Dataset) -> Result<TestPredictions> {
        Ok(match self {
            Predictor::Classifier(model) => TestPredictions::Classification {
                probs: test.features().iter().map(|x| model.predict_proba(x)).collect::<Result<_>>()?,
                labels: test.labels()?.to_vec(),
            },
            Predictor::Quantile(model) => TestPredictions::Regression {
                pairs: test.features().iter().map(|x| model.predict_quantiles(x)).collect::<Result<_>>()?,
                values: test.values()?.to_vec(),
            },
        })
    }
}

/// Model outputs on the global test set, cached so thresholds from several
/// methods can be evaluated without re-running the model.
#[derive(Clone, Debug)]
pub enum TestPredictions {
    Classification { probs: Vec<ProbabilityVector>, labels: Vec<usize> },
    Regression { pairs: Vec<QuantilePair>, values: Vec<f64> },
}

impl TestPredictions {
    pub fn records(&self, threshold: Threshold) -> Vec<PredictionRecord> {
        match self {
            TestPredictions::Classification { probs, labels } => probs
                .iter()
                .zip(labels)
                .map(|(p, &label)| PredictionRecord::Classification { set: aps_prediction_set(p, threshold), label })
                .collect(),
            TestPredictions::Regression { pairs, values } => pairs
                .iter()
                .zip(values)
                .map(|(pair, &value)| PredictionRecord::Regression {
                    interval: cqr_prediction_interval(pair, threshold),
                    value,
                })
                .collect(),
        }
    }
}

/// Per-seed state shared by every method: standardizer, models and test
/// predictions.
pub struct SeedModels {
    pub seed: u64,
    pub standardizer: Standardizer,
    pub predictors: Vec<Predictor>,
    pub test: Vec<TestPredictions>,
    /// Standardized calibration pool.
    pub calibration: Dataset,
}

fn mask_seed(seed: u64, agent: AgentId) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ agent as u64
}

/// Steps 1–5 of a seed: load, split, standardize, train.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedModels> {
    let (pool, test) = cfg.dataset.load(seed)?;
    let (train, cal) = train_cal_split(&pool, cfg.cal_fraction, seed)?;
    let standardizer = Standardizer::fit(&train)?;
    let train = standardizer.transform(&train);
    let cal = standardizer.transform(&cal);
    let test = standardizer.transform(&test);
    let dim = train.dim();

    let train_one = |strength: Strength, mask: Option<Vec<usize>>| -> Result<Predictor> {
        let model_cfg = cfg.models.agent_config(strength, cfg.alpha, mask);
        Ok(match train.task() {
            Task::Classification { .. } => Predictor::Classifier(Arc::new(train_classifier(&train, &model_cfg)?)),
            Task::Regression => Predictor::Quantile(Arc::new(train_quantile_regressor(&train, &model_cfg)?)),
        })
    };
    let strong = if cfg.strong_agents > 0 { Some(train_one(Strength::Strong, None)?) } else { None };
    let predictors: Vec<Predictor> = (0..cfg.agents)
        .into_par_iter()
        .map(|agent| match cfg.strength(agent) {
            Strength::Strong => Ok(strong.clone().expect("strong model trained when strong agents exist")),
            Strength::Weak => {
                let mask = weak_feature_mask(dim, cfg.models.weak_feature_fraction, mask_seed(seed, agent));
                train_one(Strength::Weak, Some(mask))
            }
        })
        .collect::<Result<_>>()?;
    let test = predictors.par_iter().map(|p| p.test_predictions(&test)).collect::<Result<Vec<_>>>()?;
    Ok(SeedModels { seed, standardizer, predictors, test, calibration: cal })
}

/// Label skew for classification, K-means covariate skew for regression.
pub fn partition_calibration(cal: &Dataset, cfg: &ExperimentConfig, beta: f64, seed: u64) -> Result<PartitionPlan> {
    match cal.task() {
        Task::Classification { .. } => dirichlet_label_partition(cal, cfg.agents, beta, seed),
        Task::Regression => dirichlet_covariate_partition(cal, cfg.agents, beta, cfg.bins, seed),
    }
}

/// Calibration scores of each agent on its partition cell.
pub fn agent_scores(models: &SeedModels, cal: &Dataset, plan: &PartitionPlan) -> Result<Vec<Vec<f64>>> {
    plan.assignments
        .par_iter()
        .zip(&models.predictors)
        .map(|(idx, predictor)| predictor.scores(&cal.subset(idx)))
        .collect()
}

/// Thresholds for every agent from one round, plus its wall time.
///
/// Agents with no calibration data sit the round out; they apply the
/// broadcast threshold, or the sentinel under `LocalOnly`.
pub fn calibrate_agents(
    scores: &[Vec<f64>],
    method: AggregationMethod,
    alpha: f64,
    round_id: &str,
    networked: bool,
) -> Result<(Vec<Threshold>, f64)> {
    let start = Instant::now();
    let mut participants = Vec::new();
    for (agent, s) in scores.iter().enumerate() {
        if s.is_empty() {
            warn!("round {round_id}: agent {agent} has no calibration data and sits out");
        } else {
            participants.push(AgentCalibration { agent_id: agent, sample: ScoreSample::new(s.clone())? });
        }
    }
    if participants.is_empty() {
        return Err(Error::validation(format!("round {round_id}: no agent has calibration data")));
    }
    let round_cfg = CalibrationRoundConfig::new(alpha, method, participants.len(), round_id)?;
    let received: Vec<(AgentId, AggregatedThreshold)> = if networked {
        run_networked(&participants, &round_cfg)?
    } else {
        run_round_simulated(&participants, &round_cfg)?.received
    };
    let broadcast = received.first().map(|(_, t)| t.q_hat);
    let thresholds = (0..scores.len())
        .map(|agent| match received.iter().find(|(id, _)| *id == agent) {
            Some((_, t)) => t.q_hat,
            None if method == AggregationMethod::LocalOnly => Threshold::INFINITE,
            None => broadcast.expect("at least one participant"),
        })
        .collect();
    Ok((thresholds, start.elapsed().as_secs_f64()))
}

/// Loopback round: a server plus one thread per agent, launched in id order.
pub fn run_networked(
    participants: &[AgentCalibration],
    round_cfg: &CalibrationRoundConfig,
) -> Result<Vec<(AgentId, AggregatedThreshold)>> {
    let server = serve("127.0.0.1:0", round_cfg)?;
    let addr = server.local_addr();
    let received = thread::scope(|scope| {
        let handles: Vec<_> = participants
            .iter()
            .map(|a| scope.spawn(move || run_agent(addr, a.agent_id, &a.sample, round_cfg).map(|t| (a.agent_id, t))))
            .collect();
        handles.into_iter().map(|h| h.join().expect("agent thread panicked")).collect::<Result<Vec<_>>>()
    });
    let server_result = server.wait();
    let received = received?;
    server_result?;
    Ok(received)
}

pub fn round_id(seed: u64, method: AggregationMethod) -> String {
    format!("seed-{seed}-{method}")
}

fn evaluate(
    models: &SeedModels,
    thresholds: &[Threshold],
    method: AggregationMethod,
    seed: u64,
) -> Result<CoverageReport> {
    let records: BTreeMap<AgentId, Vec<PredictionRecord>> =
        thresholds.iter().enumerate().map(|(agent, &t)| (agent, models.test[agent].records(t))).collect();
    build_report(&records, thresholds.len(), method, seed)
}

/// Thresholds applied by every agent after one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round_id: String,
    pub seed: u64,
    pub method: AggregationMethod,
    pub alpha: f64,
    /// Indexed by agent id.
    pub thresholds: Vec<Threshold>,
}

/// An agent's calibration scores, as read by a standalone agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreFile {
    pub agent_id: AgentId,
    pub scores: Vec<f64>,
}

/// One seed: reports and rounds per method, plus the agents' scores.
pub struct SeedOutput {
    pub reports: Vec<CoverageReport>,
    pub rounds: Vec<RoundRecord>,
    pub scores: Vec<Vec<f64>>,
}

/// All methods of the config on one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    let models = prepare_seed(cfg, seed)?;
    let plan = partition_calibration(&models.calibration, cfg, cfg.beta, seed)?;
    let scores = agent_scores(&models, &models.calibration, &plan)?;
    let mut reports = Vec::with_capacity(cfg.methods.len());
    let mut rounds = Vec::with_capacity(cfg.methods.len());
    for &method in &cfg.methods {
        let round_id = round_id(seed, method);
        let (thresholds, runtime) = calibrate_agents(&scores, method, cfg.alpha, &round_id, cfg.networked)?;
        let mut report = evaluate(&models, &thresholds, method, seed)?;
        report.runtime_s = cfg.measure_runtime.then_some(runtime);
        reports.push(report);
        rounds.push(RoundRecord { round_id, seed, method, alpha: cfg.alpha, thresholds });
    }
    Ok(SeedOutput { reports, rounds, scores })
}

/// Everything a run persists.
pub struct ExperimentOutput {
    /// Ordered by method (config order) then seed (config order).
    pub reports: Vec<CoverageReport>,
    /// Same order as `reports`.
    pub rounds: Vec<RoundRecord>,
    /// Per seed, each agent's calibration scores.
    pub scores: Vec<(u64, Vec<Vec<f64>>)>,
}

pub fn run_experiment_full(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let per_seed: Vec<SeedOutput> = cfg.seeds.par_iter().map(|&seed| run_seed(cfg, seed)).collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(per_seed.len() * cfg.methods.len());
    let mut rounds = Vec::with_capacity(reports.capacity());
    for m in 0..cfg.methods.len() {
        reports.extend(per_seed.iter().map(|s| s.reports[m].clone()));
        rounds.extend(per_seed.iter().map(|s| s.rounds[m].clone()));
    }
    let scores = cfg.seeds.iter().copied().zip(per_seed.into_iter().map(|s| s.scores)).collect();
    info!("completed {} seeds x {} methods", cfg.seeds.len(), cfg.methods.len());
    Ok(ExperimentOutput { reports, rounds, scores })
}

/// Reports ordered by method (config order) then seed (config order).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<CoverageReport>> {
    Ok(run_experiment_full(cfg)?.reports)
}

/// One line of the coverage CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub dataset: String,
    pub method: AggregationMethod,
    pub seed: u64,
    /// Agent id, or [`GLOBAL_ROW`].
    pub agent: String,
    pub coverage: f64,
    pub efficiency: f64,
    pub runtime_s: Option<f64>,
}

pub fn coverage_rows(dataset: &str, reports: &[CoverageReport]) -> Vec<CoverageRow> {
    let mut rows = Vec::new();
    for r in reports {
        let row = |agent: String, coverage, efficiency| CoverageRow {
            dataset: dataset.to_string(),
            method: r.method,
            seed: r.seed,
            agent,
            coverage,
            efficiency,
            runtime_s: r.runtime_s,
        };
        for (agent, &cov) in &r.per_agent_coverage {
            rows.push(row(agent.to_string(), cov, r.per_agent_efficiency[agent]));
        }
        rows.push(row(GLOBAL_ROW.to_string(), r.global_coverage, r.global_efficiency));
    }
    rows
}

/// Seed-level summary of one (dataset, method, agent, metric) group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: AggregationMethod,
    pub agent: String,
    pub metric: String,
    pub median: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
}

/// Bootstrap seed for a summary group, fixed by its position.
const SUMMARY_SEED: u64 = 0x5EED;

/// Median and bootstrap interval per group; groups with a single seed are
/// skipped since an interval needs at least two values.
pub fn summarize(rows: &[CoverageRow]) -> Result<Vec<SummaryRow>> {
    // (dataset, method, agent) -> (coverages, efficiencies), in first-seen order.
    type Group = ((String, AggregationMethod, String), (Vec<f64>, Vec<f64>));
    let mut groups: Vec<Group> = Vec::new();
    for row in rows {
        let key = (row.dataset.clone(), row.method, row.agent.clone());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (cov, eff))) => {
                cov.push(row.coverage);
                eff.push(row.efficiency);
            }
            None => groups.push((key, (vec![row.coverage], vec![row.efficiency]))),
        }
    }
    let mut out = Vec::new();
    for (i, ((dataset, method, agent), (cov, eff))) in groups.into_iter().enumerate() {
        if cov.len() < 2 {
            continue;
        }
        for (metric, values) in [("coverage", cov), ("efficiency", eff)] {
            let SeedSummary { median, ci_lo, ci_hi, n_seeds } = seed_summary(&values, SUMMARY_SEED + i as u64)?;
            out.push(SummaryRow {
                dataset: dataset.clone(),
                method,
                agent: agent.clone(),
                metric: metric.to_string(),
                median,
                ci_lo,
                ci_hi,
                n_seeds,
            });
        }
    }
    Ok(out)
}

/// Writes next to `path` and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row)?;
    }
    writer.into_inner().map_err(|e| Error::Transport(e.into_error()))
}

pub fn write_coverage_csv(path: &Path, rows: &[CoverageRow]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

pub fn read_coverage_csv(path: &Path) -> Result<Vec<CoverageRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

/// Persists the coverage CSV, the summary CSV and the full reports.
pub fn write_outputs(dir: &Path, dataset: &str, reports: &[CoverageReport]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let rows = coverage_rows(dataset, reports);
    write_coverage_csv(&dir.join(COVERAGE_CSV), &rows)?;
    write_summary_csv(&dir.join(SUMMARY_CSV), &summarize(&rows)?)?;
    let mut json = serde_json::to_vec_pretty(reports)?;
    json.push(b'\n');
    write_atomic(&dir.join(REPORTS_JSON), &json)
}

/// Path of an agent's score file for one seed.
pub fn score_file_path(dir: &Path, seed: u64, agent: AgentId) -> PathBuf {
    dir.join(SCORES_DIR).join(format!("seed-{seed}-agent-{agent}.json"))
}

pub fn read_score_file(path: &Path) -> Result<ScoreFile> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    fs::read_to_string(path)?.lines().map(|line| Ok(serde_json::from_str(line)?)).collect()
}

/// [`write_outputs`] plus `rounds.jsonl` and, when asked for, score files.
pub fn write_experiment(dir: &Path, cfg: &ExperimentConfig, output: &ExperimentOutput) -> Result<()> {
    write_outputs(dir, &cfg.dataset.name(), &output.reports)?;
    let mut lines = Vec::new();
    for round in &output.rounds {
        serde_json::to_writer(&mut lines, round)?;
        lines.push(b'\n');
    }
    write_atomic(&dir.join(ROUNDS_JSONL), &lines)?;
    if cfg.save_scores {
        fs::create_dir_all(dir.join(SCORES_DIR))?;
        for (seed, per_agent) in &output.scores {
            for (agent_id, scores) in per_agent.iter().enumerate() {
                let file = ScoreFile { agent_id, scores: scores.clone() };
                write_atomic(&score_file_path(dir, *seed, agent_id), &serde_json::to_vec(&file)?)?;
            }
        }
    }
    Ok(())
}
