use super::{classification_metrics, EvalMetrics, LearningError, Model, ParamVector};
use crate::data::Dataset;

pub const ANOMALY_PERCENTILE: f64 = 95.0;
pub const MIN_THRESHOLD_SAMPLES: usize = 20;

/// Percentile with linear interpolation between order statistics
/// (position `q/100 * (n-1)` in the sorted sample).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&q) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Autoencoder parameters plus a reconstruction-error cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyModel {
    pub model: Model,
    pub params: ParamVector,
    threshold: Option<f64>,
}

impl AnomalyModel {
    pub fn new(model: Model, params: ParamVector) -> Self {
        Self { model, params, threshold: None }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    /// Returns a copy whose threshold is the 95th percentile of `train_errors`.
    pub fn fit_threshold(&self, train_errors: &[f64]) -> Result<Self, LearningError> {
        if train_errors.len() < MIN_THRESHOLD_SAMPLES {
            return Err(LearningError::InsufficientData {
                needed: MIN_THRESHOLD_SAMPLES,
                actual: train_errors.len(),
            });
        }
        let threshold = percentile(train_errors, ANOMALY_PERCENTILE).expect("non-empty");
        Ok(Self { threshold: Some(threshold.max(0.0)), ..self.clone() })
    }

    /// Fits the threshold on the normal rows of `train` under the current parameters.
    pub fn fit_on(&self, train: &Dataset) -> Result<Self, LearningError> {
        let errors = self.model.reconstruction_errors(self.params.values(), train.features.view());
        let normal: Vec<f64> = errors
            .iter()
            .zip(&train.labels)
            .filter(|(_, &l)| l == 0)
            .map(|(&e, _)| e)
            .collect();
        if normal.len() >= MIN_THRESHOLD_SAMPLES {
            self.fit_threshold(&normal)
        } else {
            self.fit_threshold(&errors)
        }
    }

    /// Errors strictly above the threshold are anomalies. Unfitted models flag nothing.
    pub fn is_anomaly(&self, error: f64) -> bool {
        self.threshold.is_some_and(|t| error > t)
    }

    pub fn predict(&self, data: &Dataset) -> Vec<usize> {
        self.model
            .reconstruction_errors(self.params.values(), data.features.view())
            .into_iter()
            .map(|e| usize::from(self.is_anomaly(e)))
            .collect()
    }

    /// Loss is the mean reconstruction error; labels are 0 = normal, 1 = anomaly.
    pub fn evaluate(&self, test: &Dataset) -> Result<EvalMetrics, LearningError> {
        self.model.check_data(test)?;
        let errors = self.model.reconstruction_errors(self.params.values(), test.features.view());
        let loss = errors.iter().sum::<f64>() / errors.len() as f64;
        let pred: Vec<usize> = errors.iter().map(|&e| usize::from(self.is_anomaly(e))).collect();
        Ok(classification_metrics(&test.labels, &pred, loss))
    }
}

/// Convenience for fitting a threshold on a bare error sample.
pub fn fit_anomaly_threshold(model: &AnomalyModel, train_errors: &[f64]) -> Result<AnomalyModel, LearningError> {
    model.fit_threshold(train_errors)
}
