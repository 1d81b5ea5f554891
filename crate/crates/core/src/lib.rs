//! Trajectory-level confidence calibration for multi-step LLM agents.
//!
//! An agent run is recorded as a [`Trajectory`]: an ordered list of steps, each
//! holding the per-token confidences emitted while generating that step. This
//! crate turns such traces into a fixed 48-dimensional diagnostic
//! [`FeatureVector`], fits sparse or dense logistic calibrators on top of those
//! features, and scores any set of confidences with ECE, Brier and AUROC.
//!
//! The main pieces:
//!
//! - [`trace`]: trajectory data model and the line-delimited trace format.
//! - [`features`]: per-step summaries and the 48-feature map.
//! - [`metrics`]: calibration and discrimination metrics, reliability bins.
//! - [`calibrator`]: L1/L2 logistic calibrators, prediction, model files.
//! - [`baselines`]: last-step / global-trace confidence, temperature scaling,
//!   verbalized-confidence parsing.
//! - [`pipeline`]: stratified cross-validation, alpha grid search, transfer
//!   evaluation, pooled pretraining.
//! - [`synth`]: chain-of-subgoals trajectory generator with known success
//!   probabilities.

pub mod baselines;
pub mod calibrator;
mod error;
pub mod features;
pub mod metrics;
pub mod pipeline;
pub mod synth;
pub mod table;
pub mod trace;

pub use error::{Error, Result};

pub use calibrator::{CalibrationModel, Penalty, TrainConfig};
pub use features::{FeatureCategory, FeatureVector, StepSummary, FEATURE_COUNT, FEATURE_NAMES};
pub use metrics::{EvalReport, PredictionSet, ReliabilityBins};
pub use pipeline::{CvReport, Dataset};
pub use trace::{Step, TokenConfidence, Trajectory};

/// Regularizer added to denominators and log arguments throughout the feature map.
pub const EPSILON: f64 = 1e-8;

/// Formats a real in its shortest round-trip decimal form.
pub fn fmt_real(x: f64) -> String {
    format!("{x:?}")
}
