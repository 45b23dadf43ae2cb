//! Desk-scale strong and weak predictors.
//!
//! Classification uses multinomial logistic regression and regression uses
//! a pair of linear pinball-loss heads. Both train by full-batch gradient
//! descent from zero parameters, so a trained model is a pure function of
//! its data and config. Weak agents train for fewer epochs and only see a
//! masked subset of the features.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Task};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::scores::{ProbabilityVector, QuantilePair};

pub const STRONG_EPOCHS: usize = 5;
pub const WEAK_EPOCHS: usize = 1;
pub const DEFAULT_STEPS_PER_EPOCH: usize = 100;
pub const WEAK_FEATURE_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Strong,
    Weak,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentModelConfig {
    pub strength: Strength,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub learning_rate: f64,
    /// Feature columns the model may read; `None` means all of them.
    pub feature_mask: Option<Vec<usize>>,
    /// Lower/upper levels of the quantile heads (regression only).
    pub quantile_levels: (f64, f64),
}

impl AgentModelConfig {
    pub fn strong(alpha: f64) -> Self {
        AgentModelConfig {
            strength: Strength::Strong,
            epochs: STRONG_EPOCHS,
            steps_per_epoch: DEFAULT_STEPS_PER_EPOCH,
            learning_rate: 0.5,
            feature_mask: None,
            quantile_levels: (alpha / 2.0, 1.0 - alpha / 2.0),
        }
    }

    pub fn weak(alpha: f64, feature_mask: Vec<usize>) -> Self {
        AgentModelConfig {
            strength: Strength::Weak,
            epochs: WEAK_EPOCHS,
            feature_mask: Some(feature_mask),
            ..AgentModelConfig::strong(alpha)
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::validation(format!("learning rate {} must be positive", self.learning_rate)));
        }
        let (lo, hi) = self.quantile_levels;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::validation(format!("quantile levels ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        if let Some(mask) = &self.feature_mask {
            if mask.is_empty() {
                return Err(Error::validation("feature mask is empty"));
            }
            if let Some(&bad) = mask.iter().find(|&&i| i >= input_dim) {
                return Err(Error::Index { index: bad, len: input_dim });
            }
        }
        Ok(())
    }

    fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// Seeded random subset of `ceil(fraction · dim)` feature columns, sorted.
pub fn weak_feature_mask(dim: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let keep = ((dim as f64 * fraction).ceil() as usize).clamp(1, dim.max(1));
    let mut mask = index::sample(&mut seeded(seed, 0x3A5C), dim, keep).into_vec();
    mask.sort_unstable();
    mask
}

/// Column projection shared by both model families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FeatureView {
    input_dim: usize,
    mask: Option<Vec<usize>>,
}

impl FeatureView {
    fn effective_dim(&self) -> usize {
        self.mask.as_ref().map_or(self.input_dim, Vec::len)
    }

    fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::validation(format!("input has {} features, model expects {}", x.len(), self.input_dim)));
        }
        Ok(match &self.mask {
            Some(mask) => mask.iter().map(|&i| x[i]).collect(),
            None => x.to_vec(),
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Multinomial logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    /// `num_classes × effective_dim`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    view: FeatureView,
    pub config: AgentModelConfig,
}

impl Classifier {
    pub fn zeros(num_classes: usize, input_dim: usize, config: AgentModelConfig) -> Result<Self> {
        config.validate(input_dim)?;
        let view = FeatureView { input_dim, mask: config.feature_mask.clone() };
        Ok(Classifier {
            weights: vec![vec![0.0; view.effective_dim()]; num_classes],
            bias: vec![0.0; num_classes],
            view,
            config,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn input_dim(&self) -> usize {
        self.view.input_dim
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, z) + b).collect()
    }

    /// Softmax class probabilities for a full-width feature vector.
    pub fn predict_proba(&self, x: &[f64]) -> Result<ProbabilityVector> {
        let z = self.view.project(x)?;
        ProbabilityVector::new(softmax(&self.logits(&z)))
    }

    fn projected(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        data.features().iter().map(|x| self.view.project(x)).collect()
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, data: &Dataset) -> Result<f64> {
        let labels = data.labels()?;
        let z = self.projected(data)?;
        let mut total = 0.0;
        for (x, &y) in z.iter().zip(labels) {
            let logits = self.logits(x);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += lse - logits[y];
        }
        Ok(total / data.len() as f64)
    }

    /// Gradient of [`Classifier::loss`] with respect to `(weights, bias)`.
    pub fn gradient(&self, data: &Dataset) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let z = self.projected(data)?;
        self.gradient_projected(&z, data.labels()?)
    }

    fn gradient_projected(&self, z: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let n = z.len() as f64;
        let mut gw = vec![vec![0.0; self.view.effective_dim()]; self.num_classes()];
        let mut gb = vec![0.0; self.num_classes()];
        for (x, &y) in z.iter().zip(labels) {
            let mut residual = softmax(&self.logits(x));
            residual[y] -= 1.0;
            for (c, r) in residual.iter().enumerate() {
                gb[c] += r / n;
                for (g, v) in gw[c].iter_mut().zip(x) {
                    *g += r * v / n;
                }
            }
        }
        Ok((gw, gb))
    }
}

/// Full-batch gradient descent on cross-entropy from zero parameters.
pub fn train_classifier(train: &Dataset, cfg: &AgentModelConfig) -> Result<Classifier> {
    let Task::Classification { num_classes } = train.task() else {
        return Err(Error::TaskMismatch { expected: "classification", found: "regression" });
    };
    let labels = train.labels()?;
    if labels.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::validation("training data contains a single class"));
    }
    let mut model = Classifier::zeros(num_classes, train.dim(), cfg.clone())?;
    let z = model.projected(train)?;
    let lr = cfg.learning_rate;
    for _ in 0..cfg.total_steps() {
        let (gw, gb) = model.gradient_projected(&z, labels)?;
        for (w_row, g_row) in model.weights.iter_mut().zip(&gw) {
            for (w, g) in w_row.iter_mut().zip(g_row) {
                *w -= lr * g;
            }
        }
        for (b, g) in model.bias.iter_mut().zip(&gb) {
            *b -= lr * g;
        }
    }
    Ok(model)
}

/// `ρ_τ(u) = u (τ − 1{u < 0})`.
pub fn pinball_loss(tau: f64, u: f64) -> f64 {
    u * (tau - if u < 0.0 { 1.0 } else { 0.0 })
}

/// Subgradient of `ρ_τ` in `u`; the kink takes the `u < 0` branch.
pub fn pinball_derivative(tau: f64, u: f64) -> f64 {
    if u > 0.0 {
        tau
    } else {
        tau - 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub tau: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearHead {
    fn predict(&self, z: &[f64]) -> f64 {
        dot(&self.weights, z) + self.bias
    }

    fn loss_projected(&self, z: &[Vec<f64>], y: &[f64]) -> f64 {
        z.iter().zip(y).map(|(x, &t)| pinball_loss(self.tau, t - self.predict(x))).sum::<f64>() / z.len() as f64
    }

    fn gradient_projected(&self, z: &[Vec<f64>], y: &[f64]) -> (Vec<f64>, f64) {
        let n = z.len() as f64;
        let mut gw = vec![0.0; self.weights.len()];
        let mut gb = 0.0;
        for (x, &t) in z.iter().zip(y) {
            // d/dpred ρ(t − pred) = −ρ'(u)
            let d = -pinball_derivative(self.tau, t - self.predict(x)) / n;
            gb += d;
            for (g, v) in gw.iter_mut().zip(x) {
                *g += d * v;
            }
        }
        (gw, gb)
    }

    fn step(&mut self, z: &[Vec<f64>], y: &[f64], lr: f64) {
        let (gw, gb) = self.gradient_projected(z, y);
        for (w, g) in self.weights.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        self.bias -= lr * gb;
    }
}

/// Gradient of one head: weights, then bias.
pub type HeadGradient = (Vec<f64>, f64);

/// Two pinball heads at the configured lower/upper quantile levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRegressor {
    pub lower: LinearHead,
    pub upper: LinearHead,
    view: FeatureView,
    pub config: AgentModelConfig,
}

impl QuantileRegressor {
    pub fn zeros(input_dim: usize, config: AgentModelConfig) -> Result<Self> {
        config.validate(input_dim)?;
        let view = FeatureView { input_dim, mask: config.feature_mask.clone() };
        let head = |tau| LinearHead { tau, weights: vec![0.0; view.effective_dim()], bias: 0.0 };
        Ok(QuantileRegressor {
            lower: head(config.quantile_levels.0),
            upper: head(config.quantile_levels.1),
            view,
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.view.input_dim
    }

    pub fn predict_quantiles(&self, x: &[f64]) -> Result<QuantilePair> {
        let z = self.view.project(x)?;
        QuantilePair::new(self.lower.predict(&z), self.upper.predict(&z))
    }

    fn projected(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        data.features().iter().map(|x| self.view.project(x)).collect()
    }

    /// Mean pinball losses of the `(lower, upper)` heads.
    pub fn loss(&self, data: &Dataset) -> Result<(f64, f64)> {
        let z = self.projected(data)?;
        let y = data.values()?;
        Ok((self.lower.loss_projected(&z, y), self.upper.loss_projected(&z, y)))
    }

    /// Gradients `(weights, bias)` of the lower and upper head losses.
    pub fn gradient(&self, data: &Dataset) -> Result<(HeadGradient, HeadGradient)> {
        let z = self.projected(data)?;
        let y = data.values()?;
        Ok((self.lower.gradient_projected(&z, y), self.upper.gradient_projected(&z, y)))
    }
}

/// Full-batch subgradient descent on the pinball loss of each head.
pub fn train_quantile_regressor(train: &Dataset, cfg: &AgentModelConfig) -> Result<QuantileRegressor> {
    let y = train.values()?;
    if y.is_empty() {
        return Err(Error::validation("empty training set"));
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(Error::validation("training targets are constant"));
    }
    let mut model = QuantileRegressor::zeros(train.dim(), cfg.clone())?;
    let z = model.projected(train)?;
    for _ in 0..cfg.total_steps() {
        model.lower.step(&z, y, cfg.learning_rate);
        model.upper.step(&z, y, cfg.learning_rate);
    }
    Ok(model)
}
