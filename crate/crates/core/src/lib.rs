//! Federated conformal calibration with one-shot quantile aggregation.
//!
//! Each agent calibrates a split-conformal threshold on its own scores and
//! sends only `(q̂_k, n_k)`; the server returns the sample-size weighted
//! mean. The crate also carries the baselines, data generators, models,
//! evaluation and numerical audits used to study the method.

pub mod ablation;
pub mod aggregation;
pub mod calibration;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod partition;
pub mod rng;
pub mod scores;
pub mod theory;
pub mod threshold;

pub use aggregation::{aggregate, AggregatedThreshold, AggregationInput, AggregationMethod, AggregationOutcome};
pub use calibration::{local_threshold, AgentId, CalibrationConfig, LocalQuantileSummary, ScoreSample};
pub use error::{Error, Result};
pub use threshold::Threshold;
