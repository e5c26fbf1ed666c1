//! Local training and evaluation: the train, test and loss phases of a
//! participant's round.
//!
//! Three trainers are available, all with closed-form gradients:
//! softmax (logistic) regression, a one-hidden-layer tanh MLP, and a
//! single-hidden-layer autoencoder used for anomaly detection.

mod anomaly;
mod metrics;
mod models;

pub use anomaly::{fit_anomaly_threshold, percentile, AnomalyModel, ANOMALY_PERCENTILE, MIN_THRESHOLD_SAMPLES};
pub use metrics::{classification_metrics, ClassStats, EvalMetrics};
pub use models::Model;

use std::fmt;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error, PartialEq)]
pub enum LearningError {
    #[error("unknown trainer kind `{0}`")]
    UnknownTrainer(String),
    #[error("empty dataset")]
    EmptyData,
    #[error("training diverged (non-finite loss at epoch {epoch}); learning rate too large?")]
    Diverged { epoch: usize },
    #[error("parameter layout mismatch: expected {expected} values, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("feature dimension mismatch: model expects {expected}, data has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} reconstruction errors, got {actual}")]
    InsufficientData { needed: usize, actual: usize },
}

/// One named tensor inside a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorShape {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub tensors: Vec<TensorShape>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.tensors.iter().map(TensorShape::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of each tensor in the flat vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .scan(0, |acc, t| {
                let start = *acc;
                *acc += t.numel();
                Some(start)
            })
            .collect()
    }
}

/// Flat model parameters in 64-bit working precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self, LearningError> {
        if values.len() != layout.len() {
            return Err(LearningError::LayoutMismatch { expected: layout.len(), actual: values.len() });
        }
        Ok(Self { values, layout })
    }

    /// A vector without tensor structure (one flat tensor).
    pub fn flat(values: Vec<f64>) -> Self {
        let layout = Layout { tensors: vec![TensorShape { name: "flat".into(), shape: vec![values.len()] }] };
        Self { values, layout }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, LearningError> {
        Self::new(values, self.layout.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainerKind {
    Logistic,
    Mlp { hidden: usize },
    Autoencoder { hidden: usize },
}

impl TrainerKind {
    pub fn from_name(name: &str, hidden: usize) -> Result<Self, LearningError> {
        match name {
            "logistic" => Ok(Self::Logistic),
            "mlp" => Ok(Self::Mlp { hidden }),
            "autoencoder" => Ok(Self::Autoencoder { hidden }),
            other => Err(LearningError::UnknownTrainer(other.to_string())),
        }
    }

    pub fn is_anomaly_detector(&self) -> bool {
        matches!(self, Self::Autoencoder { .. })
    }
}

impl fmt::Display for TrainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Logistic => write!(f, "logistic"),
            Self::Mlp { hidden } => write!(f, "mlp(hidden={hidden})"),
            Self::Autoencoder { hidden } => write!(f, "autoencoder(hidden={hidden})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    /// Local epochs per round.
    pub epochs: usize,
    pub alpha: f64,
    /// L2 coefficient applied to every parameter.
    pub lambda: f64,
    /// Federation rounds.
    pub rounds: usize,
    pub batch_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self { epochs: 20, alpha: 0.1, lambda: 1e-4, rounds: 10, batch_size: 32 }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        let bad = |what: &str| Err(LearningError::InvalidConfig(what.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be finite and non-negative");
        }
        Ok(())
    }
}

pub fn init_params(trainer: TrainerKind, d: usize, c: usize, seed: u64) -> Result<ParamVector, LearningError> {
    Model::new(trainer, d, c)?.init_params(seed)
}

/// Mini-batch SGD with the L2 term folded into every step:
/// `theta <- theta - alpha * (grad J(theta; batch) + lambda * theta)`.
///
/// The autoencoder only sees normal (label 0) rows when any are present.
pub fn train_local(
    model: &Model,
    params: &ParamVector,
    train: &Dataset,
    cfg: &TrainingConfig,
    seed: u64,
) -> Result<ParamVector, LearningError> {
    model.check_params(params)?;
    model.check_data(train)?;
    let rows: Vec<usize> = if model.kind().is_anomaly_detector() {
        let normal: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] == 0).collect();
        if normal.is_empty() {
            (0..train.len()).collect()
        } else {
            normal
        }
    } else {
        (0..train.len()).collect()
    };
    if rows.is_empty() {
        return Err(LearningError::EmptyData);
    }
    let mut theta = params.values().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = rows;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let x = train.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grad) = model.loss_and_grad(&theta, x.view(), &y);
            if !loss.is_finite() {
                return Err(LearningError::Diverged { epoch });
            }
            for (t, g) in theta.iter_mut().zip(&grad) {
                *t -= cfg.alpha * (g + cfg.lambda * *t);
            }
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(LearningError::Diverged { epoch });
        }
    }
    params.with_values(theta)
}

/// Classifier evaluation: mean cross-entropy plus macro-averaged metrics.
pub fn evaluate(model: &Model, params: &ParamVector, test: &Dataset) -> Result<EvalMetrics, LearningError> {
    model.check_params(params)?;
    model.check_data(test)?;
    if model.kind().is_anomaly_detector() {
        return Err(LearningError::InvalidConfig(
            "autoencoders are evaluated through AnomalyModel".into(),
        ));
    }
    let losses = model.per_sample_loss(params.values(), test.features.view(), &test.labels);
    let loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let pred = model.predict(params.values(), test.features.view());
    Ok(classification_metrics(&test.labels, &pred, loss))
}
