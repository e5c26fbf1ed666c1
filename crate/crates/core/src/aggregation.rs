//! Combining a node's parameters with those received from its peers.
//!
//! [`fedavg`] is the unweighted mean of the node's own vector and every
//! received vector. [`krum`], [`trimmed_mean`] and [`median`] are the robust
//! alternatives; they treat the node's own vector as one more candidate.
//!
//! All coordinate-wise reductions sort the values of each coordinate first,
//! so results do not depend on the order in which peers were heard from.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::learning::ParamVector;
use crate::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AggregationError {
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },
    #[error("{algorithm} needs at least {needed} vectors, got {actual}")]
    TooFewVectors { algorithm: &'static str, needed: usize, actual: usize },
    #[error("duplicate sender {0}")]
    DuplicateSender(NodeId),
    #[error("unknown aggregator `{0}`")]
    UnknownAlgorithm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Algorithm {
    #[serde(rename = "fedavg")]
    FedAvg,
    Krum { f: usize },
    TrimmedMean { k_trim: usize },
    Median,
}

impl Algorithm {
    pub fn from_name(name: &str, f: usize, k_trim: usize) -> Result<Self, AggregationError> {
        match name {
            "fedavg" => Ok(Self::FedAvg),
            "krum" => Ok(Self::Krum { f }),
            "trimmed_mean" => Ok(Self::TrimmedMean { k_trim }),
            "median" => Ok(Self::Median),
            other => Err(AggregationError::UnknownAlgorithm(other.into())),
        }
    }

    /// Smallest candidate-set size the algorithm accepts.
    pub fn min_vectors(&self) -> usize {
        match *self {
            Self::FedAvg | Self::Median => 1,
            Self::Krum { f } => 2 * f + 3,
            Self::TrimmedMean { k_trim } => 2 * k_trim + 1,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FedAvg => write!(f, "fedavg"),
            Self::Krum { f: byz } => write!(f, "krum(f={byz})"),
            Self::TrimmedMean { k_trim } => write!(f, "trimmed_mean(k={k_trim})"),
            Self::Median => write!(f, "median"),
        }
    }
}

/// A node's own parameters plus what it received for the current round.
#[derive(Debug, Clone)]
pub struct AggregationInput<'a> {
    pub own: Option<&'a ParamVector>,
    pub received: Vec<(NodeId, &'a ParamVector)>,
    pub algorithm: Algorithm,
}

impl AggregationInput<'_> {
    /// Aggregates with received vectors ordered by sender id. `own`, when
    /// present, is the first candidate.
    pub fn aggregate(&self) -> Result<ParamVector, AggregationError> {
        let mut received = self.received.clone();
        received.sort_by_key(|(id, _)| *id);
        if let Some(w) = received.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(AggregationError::DuplicateSender(w[0].0));
        }
        let vectors: Vec<&ParamVector> = self.own.into_iter().chain(received.iter().map(|(_, v)| *v)).collect();
        match self.algorithm {
            Algorithm::FedAvg => mean(&vectors),
            Algorithm::Krum { f } => krum(&vectors, f),
            Algorithm::TrimmedMean { k_trim } => trimmed_mean(&vectors, k_trim),
            Algorithm::Median => median(&vectors),
        }
    }
}

fn check_shapes(vectors: &[&ParamVector]) -> Result<usize, AggregationError> {
    let len = vectors[0].len();
    for v in vectors {
        if v.len() != len {
            return Err(AggregationError::ShapeMismatch { expected: len, actual: v.len() });
        }
    }
    Ok(len)
}

fn columns<'a>(vectors: &'a [&'a ParamVector], len: usize) -> impl Iterator<Item = Vec<f64>> + 'a {
    (0..len).map(move |j| {
        let mut col: Vec<f64> = vectors.iter().map(|v| v.values()[j]).collect();
        col.sort_by(f64::total_cmp);
        col
    })
}

/// Mean of an ascending-sorted slice, computed as offsets from its minimum so
/// equal inputs come back bit-exact and the result stays within `[min, max]`.
fn sorted_mean(sorted: &[f64]) -> f64 {
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let offset: f64 = sorted.iter().map(|v| v - lo).sum();
    (lo + offset / sorted.len() as f64).clamp(lo, hi)
}

/// Unweighted element-wise mean of `vectors`.
pub fn mean(vectors: &[&ParamVector]) -> Result<ParamVector, AggregationError> {
    if vectors.is_empty() {
        return Err(AggregationError::TooFewVectors { algorithm: "fedavg", needed: 1, actual: 0 });
    }
    let len = check_shapes(vectors)?;
    let values = columns(vectors, len).map(|col| sorted_mean(&col)).collect();
    Ok(vectors[0].with_values(values).expect("length checked"))
}

/// `(own + sum(received)) / (|received| + 1)`.
pub fn fedavg(own: &ParamVector, received: &[ParamVector]) -> Result<ParamVector, AggregationError> {
    let all: Vec<&ParamVector> = std::iter::once(own).chain(received).collect();
    mean(&all)
}

fn squared_distance(a: &ParamVector, b: &ParamVector) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Krum scores: for each vector, the sum of squared distances to its
/// `n - f - 2` nearest other vectors.
pub fn krum_scores(vectors: &[&ParamVector], f: usize) -> Result<Vec<f64>, AggregationError> {
    let n = vectors.len();
    if n < 2 * f + 3 {
        return Err(AggregationError::TooFewVectors { algorithm: "krum", needed: 2 * f + 3, actual: n });
    }
    check_shapes(vectors)?;
    let nearest = n - f - 2;
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| squared_distance(vectors[i], vectors[j])).collect();
            d.sort_by(f64::total_cmp);
            d[..nearest].iter().sum()
        })
        .collect())
}

/// Vector with the lowest Krum score; ties go to the lowest index.
pub fn krum(vectors: &[&ParamVector], f: usize) -> Result<ParamVector, AggregationError> {
    let scores = krum_scores(vectors, f)?;
    let best = scores
        .iter()
        .enumerate()
        .fold(0, |best, (i, &s)| if s < scores[best] { i } else { best });
    Ok(vectors[best].clone())
}

/// Per coordinate: drop the `k_trim` largest and smallest values, average the rest.
pub fn trimmed_mean(vectors: &[&ParamVector], k_trim: usize) -> Result<ParamVector, AggregationError> {
    let n = vectors.len();
    if n <= 2 * k_trim {
        return Err(AggregationError::TooFewVectors { algorithm: "trimmed_mean", needed: 2 * k_trim + 1, actual: n });
    }
    let len = check_shapes(vectors)?;
    let values = columns(vectors, len).map(|col| sorted_mean(&col[k_trim..n - k_trim])).collect();
    Ok(vectors[0].with_values(values).expect("length checked"))
}

/// Per-coordinate median; even counts average the two middle values.
pub fn median(vectors: &[&ParamVector]) -> Result<ParamVector, AggregationError> {
    let n = vectors.len();
    if n == 0 {
        return Err(AggregationError::TooFewVectors { algorithm: "median", needed: 1, actual: 0 });
    }
    let len = check_shapes(vectors)?;
    let values = columns(vectors, len)
        .map(|col| if n % 2 == 1 { col[n / 2] } else { sorted_mean(&col[n / 2 - 1..=n / 2]) })
        .collect();
    Ok(vectors[0].with_values(values).expect("length checked"))
}
