use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub sample_count: usize,
}

/// Per-class confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassStats {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        harmonic(self.precision(), self.recall())
    }

    pub fn for_class(y_true: &[usize], y_pred: &[usize], class: usize) -> Self {
        y_true.iter().zip(y_pred).fold(Self::default(), |mut s, (&t, &p)| {
            match (t == class, p == class) {
                (true, true) => s.tp += 1,
                (false, true) => s.fp += 1,
                (true, false) => s.fn_ += 1,
                (false, false) => {}
            }
            s
        })
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Macro-averaged precision and recall over every class that appears in
/// either the labels or the predictions; `f1` is their harmonic mean.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], loss: f64) -> EvalMetrics {
    assert_eq!(y_true.len(), y_pred.len(), "label/prediction length mismatch");
    let n = y_true.len();
    let classes: BTreeSet<usize> = y_true.iter().chain(y_pred).copied().collect();
    let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count();
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for &c in &classes {
        let s = ClassStats::for_class(y_true, y_pred, c);
        p_sum += s.precision();
        r_sum += s.recall();
    }
    let k = classes.len().max(1) as f64;
    let (precision, recall) = (p_sum / k, r_sum / k);
    EvalMetrics {
        loss,
        accuracy: ratio(correct, n),
        precision,
        recall,
        f1: harmonic(precision, recall),
        sample_count: n,
    }
}
