//! The distillation target: a hashed-feature logistic classifier trained
//! with patience-based early stopping, plus a line-delimited JSON protocol
//! for delegating training to an external process.

pub mod adapter;
pub mod features;
pub mod model;
pub mod stopping;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::LabeledResponse;
use crate::evaluation::{self, EvalError};

pub use adapter::{external_trainer_roundtrip, AdapterConfig, AdapterError, ExternalTrainer};
pub use features::{featurize, FeatureVector, DEFAULT_BITS};
pub use model::{train_epoch, Example, LinearModel};
pub use stopping::{run_with_patience, EarlyStopping, Saturation, Verdict};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("non-finite loss after epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("validation data is empty")]
    EmptyValidation,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("stopping metric: {0}")]
    Metric(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMetric {
    Accuracy,
    Auc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    AdaptiveMoments,
}

pub const DEFAULT_LEARNING_RATE: f64 = 0.05;
pub const DEFAULT_PATIENCE: usize = 2;
pub const DEFAULT_MAX_EPOCHS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub stopping_metric: StoppingMetric,
    pub optimizer: OptimizerKind,
    pub hash_bits: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            patience: DEFAULT_PATIENCE,
            max_epochs: DEFAULT_MAX_EPOCHS,
            seed: 0,
            stopping_metric: StoppingMetric::Accuracy,
            optimizer: OptimizerKind::AdaptiveMoments,
            hash_bits: DEFAULT_BITS,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClassifierError::Config(
                "learning_rate must be finite and > 0".into(),
            ));
        }
        if self.patience == 0 {
            return Err(ClassifierError::Config(
                "patience must be at least 1".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(ClassifierError::Config(
                "max_epochs must be at least 1".into(),
            ));
        }
        if !(1..=features::MAX_BITS).contains(&self.hash_bits) {
            return Err(ClassifierError::Config(format!(
                "hash_bits must be in 1..={}",
                features::MAX_BITS
            )));
        }
        Ok(())
    }
}

pub fn to_examples(records: &[LabeledResponse], bits: u32) -> Vec<Example> {
    records
        .iter()
        .map(|r| Example {
            features: featurize(&r.text, bits),
            label: r.label,
        })
        .collect()
}

pub fn predict_all(model: &LinearModel, data: &[Example]) -> Vec<f64> {
    data.iter()
        .map(|e| model.predict_proba(&e.features))
        .collect()
}

fn stopping_value(
    metric: StoppingMetric,
    model: &LinearModel,
    valid: &[Example],
) -> Result<f64, ClassifierError> {
    let probs = predict_all(model, valid);
    let labels: Vec<_> = valid.iter().map(|e| e.label).collect();
    Ok(match metric {
        StoppingMetric::Accuracy => evaluation::accuracy(&probs, &labels)?,
        StoppingMetric::Auc => evaluation::roc_auc(&probs, &labels)?,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LinearModel,
    /// Epochs run in this call (1-based count).
    pub stop_epoch: usize,
    /// Epoch (within this call) whose snapshot was returned.
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<f64>,
}

/// Trains until the stopping metric fails to strictly improve on its best
/// for `patience` consecutive epochs, or `max_epochs` is reached, and
/// returns the best epoch's snapshot.
pub fn train_until_saturation(
    model: &LinearModel,
    train: &[Example],
    valid: &[Example],
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClassifierError::EmptyData);
    }
    if valid.is_empty() {
        return Err(ClassifierError::EmptyValidation);
    }
    let mut current = model.clone();
    let mut opt = model::Optimizer::new(cfg.optimizer, cfg.learning_rate, model.bits());
    let sat = run_with_patience(cfg.max_epochs, cfg.patience, |_| {
        model::run_epoch(&mut current, &mut opt, train, cfg.seed)?;
        let metric = stopping_value(cfg.stopping_metric, &current, valid)?;
        Ok::<_, ClassifierError>((metric, current.clone()))
    })?;
    log::debug!(
        "saturated after {} epochs, best epoch {} ({:.4})",
        sat.stop_epoch,
        sat.best_epoch,
        sat.best_metric
    );
    Ok(TrainOutcome {
        model: sat.snapshot,
        stop_epoch: sat.stop_epoch,
        best_epoch: sat.best_epoch,
        best_metric: sat.best_metric,
        history: sat.history,
    })
}

/// Runs exactly `epochs` epochs and returns the final model.
pub fn train_fixed_epochs(
    model: &LinearModel,
    train: &[Example],
    valid: &[Example],
    epochs: usize,
    cfg: &TrainingConfig,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ClassifierError::EmptyData);
    }
    if valid.is_empty() {
        return Err(ClassifierError::EmptyValidation);
    }
    let mut current = model.clone();
    let mut opt = model::Optimizer::new(cfg.optimizer, cfg.learning_rate, model.bits());
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        model::run_epoch(&mut current, &mut opt, train, cfg.seed)?;
        history.push(stopping_value(cfg.stopping_metric, &current, valid)?);
    }
    Ok(TrainOutcome {
        best_metric: history.last().copied().unwrap_or(f64::NAN),
        model: current,
        stop_epoch: epochs,
        best_epoch: epochs,
        history,
    })
}
