//! Desk-scale datasets, train/test splitting and participant partitioning.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Cluster centers are drawn in `[-CENTER_BOX, CENTER_BOX]^d`.
const CENTER_BOX: f64 = 4.0;
const MIN_CENTER_GAP: f64 = 2.0;
const ANOMALY_SPREAD: f64 = 0.3;
const ANOMALY_SHIFT: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("test fraction {fraction} leaves an empty side for {rows} rows")]
    InvalidFraction { fraction: f64, rows: usize },
    #[error("malformed dataset csv: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Row-major feature matrix plus class labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, classes: usize) -> Result<Self, DataError> {
        if features.nrows() != labels.len() {
            return Err(DataError::InvalidSize(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(DataError::InvalidSize(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// CSV with header `f0,..,f{d-1},label`. Values use shortest round-trip text.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut header: Vec<String> = (0..d).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        let mut out = header.join(",");
        out.push('\n');
        for (row, label) in self.features.rows().into_iter().zip(&self.labels) {
            for v in row {
                out.push_str(&v.to_string());
                out.push(',');
            }
            out.push_str(&label.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, classes: usize) -> Result<Self, DataError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| DataError::Parse("missing header".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.last() != Some(&"label") {
            return Err(DataError::Parse("last column must be `label`".into()));
        }
        let d = cols.len() - 1;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(DataError::Parse(format!("row {i}: expected {} fields", d + 1)));
            }
            for f in &fields[..d] {
                values.push(f.trim().parse::<f64>().map_err(|e| DataError::Parse(format!("row {i}: {e}")))?);
            }
            labels.push(fields[d].trim().parse::<usize>().map_err(|e| DataError::Parse(format!("row {i}: {e}")))?);
        }
        let features =
            Array2::from_shape_vec((labels.len(), d), values).map_err(|e| DataError::Parse(e.to_string()))?;
        Dataset::new(features, labels, classes)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        std::fs::write(path, self.to_csv()).map_err(|e| DataError::Io(e.to_string()))
    }
}

/// Disjoint, exhaustive, non-empty index lists, one per participant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.shards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shards.is_empty()
    }

    /// Checks the partition invariant against `0..total`.
    pub fn is_valid_over(&self, total: usize) -> bool {
        let mut seen = vec![false; total];
        for shard in &self.shards {
            if shard.is_empty() {
                return false;
            }
            for &i in shard {
                if i >= total || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Gaussian clusters with balanced classes (label `i mod c` before shuffling).
pub fn synthetic_blobs(m: usize, c: usize, d: usize, spread: f64, seed: u64) -> Result<Dataset, DataError> {
    if c < 2 || m < c {
        return Err(DataError::InvalidSize(format!("need m >= c >= 2, got m={m}, c={c}")));
    }
    if d == 0 {
        return Err(DataError::InvalidSize("dimension must be positive".into()));
    }
    if !(spread > 0.0) {
        return Err(DataError::InvalidSize(format!("spread must be positive, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut attempts = 0;
    while centers.len() < c {
        let cand: Vec<f64> = (0..d).map(|_| rng.random_range(-CENTER_BOX..CENTER_BOX)).collect();
        attempts += 1;
        let far_enough = centers.iter().all(|other| {
            other.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_CENTER_GAP
        });
        // Crowded settings (many classes, tiny d) fall back to any distinct draw.
        if far_enough || attempts > 1000 {
            centers.push(cand);
        }
    }
    let mut labels: Vec<usize> = (0..m).map(|i| i % c).collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::zeros((m, d));
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..d {
            features[[i, j]] = centers[label][j] + spread * gaussian(&mut rng);
        }
    }
    Dataset::new(features, labels, c)
}

/// Normal rows (label 0) tight around the origin; anomalies (label 1) shifted away.
pub fn synthetic_anomaly(m_normal: usize, m_anomalous: usize, d: usize, seed: u64) -> Result<Dataset, DataError> {
    if m_normal < 20 || m_anomalous < 1 || d < 1 {
        return Err(DataError::InvalidSize(format!(
            "need m_normal >= 20, m_anomalous >= 1, d >= 1; got {m_normal}, {m_anomalous}, {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = m_normal + m_anomalous;
    let mut labels: Vec<usize> = (0..m).map(|i| usize::from(i >= m_normal)).collect();
    labels.shuffle(&mut rng);
    // Anomalies get a random sign per coordinate so they do not share one direction.
    let mut features = Array2::zeros((m, d));
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..d {
            let noise = ANOMALY_SPREAD * gaussian(&mut rng);
            features[[i, j]] = if label == 1 {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                sign * ANOMALY_SHIFT + noise
            } else {
                noise
            };
        }
    }
    Dataset::new(features, labels, 2)
}

/// Shuffled `(train, test)` index split; the test side gets `floor(rows * fraction)` rows.
pub fn split_indices(rows: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidFraction { fraction: test_fraction, rows });
    }
    let n_test = (rows as f64 * test_fraction).floor() as usize;
    if n_test == 0 || n_test >= rows {
        return Err(DataError::InvalidFraction { fraction: test_fraction, rows });
    }
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(rows - n_test);
    Ok((order, test))
}

pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(dataset.len(), test_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// Random permutation cut into `k` near-equal shards; remainders go to the lowest shards.
pub fn partition_iid(train_size: usize, k: usize, seed: u64) -> Result<Partition, DataError> {
    if k == 0 || k > train_size {
        return Err(DataError::InvalidSize(format!("cannot split {train_size} samples into {k} shards")));
    }
    let mut order: Vec<usize> = (0..train_size).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Partition { shards: chop(&order, k) })
}

fn chop(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    let base = items.len() / k;
    let extra = items.len() % k;
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for s in 0..k {
        let len = base + usize::from(s < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Label-sharding: label-sorted indices are cut into `k * s` contiguous shards and
/// each client receives `s` of them via a seeded permutation.
///
/// When there are at least as many shards as classes the cut points are snapped
/// to class boundaries, so every shard holds a single label.
pub fn partition_noniid(labels: &[usize], k: usize, s: usize, seed: u64) -> Result<Partition, DataError> {
    let total = k * s;
    if k == 0 || s == 0 || total > labels.len() {
        return Err(DataError::InvalidSize(format!(
            "{k} clients x {s} shards exceeds {} samples",
            labels.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..labels.len()).collect();
    sorted.sort_by_key(|&i| (labels[i], i));

    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let groups: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| sorted.iter().copied().filter(|&i| labels[i] == c).collect())
        .collect();
    let shards = match class_aligned_counts(&groups, total) {
        Some(counts) => groups
            .iter()
            .zip(counts)
            .flat_map(|(members, count)| chop(members, count))
            .collect(),
        None => chop(&sorted, total),
    };

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let client_shards = order
        .chunks(s)
        .map(|ids| {
            let mut idx: Vec<usize> = ids.iter().flat_map(|&id| shards[id].iter().copied()).collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Ok(Partition { shards: client_shards })
}

/// Shards per class, proportional to class size (largest remainder), at least
/// one each and never more than the class has samples. None if impossible.
fn class_aligned_counts(groups: &[Vec<usize>], total: usize) -> Option<Vec<usize>> {
    if total < groups.len() {
        return None;
    }
    let m: usize = groups.iter().map(Vec::len).sum();
    let mut counts: Vec<usize> = groups.iter().map(|g| ((g.len() * total) / m).max(1)).collect();
    let mut assigned: usize = counts.iter().sum();
    while assigned > total {
        let i = (0..groups.len()).filter(|&i| counts[i] > 1).max_by_key(|&i| counts[i])?;
        counts[i] -= 1;
        assigned -= 1;
    }
    while assigned < total {
        // Give the next shard to the class with the most samples per shard.
        let i = (0..groups.len())
            .filter(|&i| counts[i] < groups[i].len())
            .max_by(|&a, &b| {
                let ra = groups[a].len() as f64 / counts[a] as f64;
                let rb = groups[b].len() as f64 / counts[b] as f64;
                ra.total_cmp(&rb).then(b.cmp(&a))
            })?;
        counts[i] += 1;
        assigned += 1;
    }
    Some(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let ds = synthetic_blobs(10, 2, 2, 0.5, 3).unwrap();
        assert_eq!(ds.class_counts(), vec![5, 5]);
        let a = synthetic_blobs(50, 3, 4, 0.2, 11).unwrap();
        let b = synthetic_blobs(50, 3, 4, 0.2, 11).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(matches!(synthetic_blobs(1, 2, 2, 0.1, 0), Err(DataError::InvalidSize(_))));
    }

    #[test]
    fn blobs_are_linearly_separable() {
        // Oracle: perceptron trained offline, independent of the trainer module.
        let ds = synthetic_blobs(100, 2, 2, 0.1, 1).unwrap();
        let mut w = [0.0f64; 3];
        for _ in 0..1000 {
            let mut errors = 0;
            for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
                let target = if y == 1 { 1.0 } else { -1.0 };
                let score = w[0] * row[0] + w[1] * row[1] + w[2];
                if score * target <= 0.0 {
                    w[0] += target * row[0];
                    w[1] += target * row[1];
                    w[2] += target;
                    errors += 1;
                }
            }
            if errors == 0 {
                break;
            }
        }
        let correct = ds
            .features
            .rows()
            .into_iter()
            .zip(&ds.labels)
            .filter(|(row, &y)| (w[0] * row[0] + w[1] * row[1] + w[2] > 0.0) == (y == 1))
            .count();
        assert!(correct as f64 / 100.0 >= 0.99, "accuracy {correct}/100");
    }

    #[test]
    fn anomaly_counts_and_separation() {
        let ds = synthetic_anomaly(100, 10, 8, 3).unwrap();
        assert_eq!(ds.len(), 110);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 1).count(), 10);
        assert_eq!(ds, synthetic_anomaly(100, 10, 8, 3).unwrap());

        let normal: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
        let centroid: Vec<f64> = (0..8)
            .map(|j| normal.iter().map(|&i| ds.features[[i, j]]).sum::<f64>() / normal.len() as f64)
            .collect();
        let mean_dist = |label: usize| {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == label).collect();
            rows.iter()
                .map(|&i| (0..8).map(|j| (ds.features[[i, j]] - centroid[j]).powi(2)).sum::<f64>().sqrt())
                .sum::<f64>()
                / rows.len() as f64
        };
        assert!(mean_dist(1) > mean_dist(0));
        assert!(synthetic_anomaly(19, 1, 2, 0).is_err());
    }

    #[test]
    fn split_arithmetic() {
        let (train, test) = split_indices(100, 0.2, 5).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let (train, test) = split_indices(100, 0.99, 5).unwrap();
        assert_eq!((train.len(), test.len()), (1, 99));
        let mut all: Vec<usize> = train.into_iter().chain(test).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(matches!(split_indices(100, 0.001, 5), Err(DataError::InvalidFraction { .. })));
        assert!(matches!(split_indices(100, 1.0, 5), Err(DataError::InvalidFraction { .. })));
    }

    #[test]
    fn iid_shard_sizes() {
        let p = partition_iid(100, 4, 0).unwrap();
        assert!(p.shards.iter().all(|s| s.len() == 25));
        let p = partition_iid(10, 3, 0).unwrap();
        assert_eq!(p.shards.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert!(p.is_valid_over(10));
        assert!(partition_iid(3, 4, 0).is_err());
    }

    #[test]
    fn iid_histograms_track_global() {
        let ds = synthetic_blobs(1000, 4, 2, 0.5, 8).unwrap();
        let p = partition_iid(1000, 4, 21).unwrap();
        for shard in &p.shards {
            let mut counts = [0usize; 4];
            for &i in shard {
                counts[ds.labels[i]] += 1;
            }
            for c in counts {
                let freq = c as f64 / shard.len() as f64;
                assert!((freq - 0.25).abs() <= 0.10, "class frequency {freq}");
            }
        }
    }

    #[test]
    fn noniid_label_support() {
        // Oracle: count distinct labels per client directly from the shard indices.
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let p = partition_noniid(&labels, 10, 2, 4).unwrap();
        assert!(p.is_valid_over(100));
        for shard in &p.shards {
            let distinct: BTreeSet<usize> = shard.iter().map(|&i| labels[i]).collect();
            assert!(distinct.len() <= 2, "{distinct:?}");
        }
        let single = partition_noniid(&labels, 1, 1, 4).unwrap();
        assert_eq!(single.shards, vec![(0..100).collect::<Vec<_>>()]);
        assert!(partition_noniid(&labels[..5], 3, 2, 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let ds = synthetic_blobs(20, 3, 3, 0.7, 2).unwrap();
        let text = ds.to_csv();
        assert!(text.starts_with("f0,f1,f2,label\n"));
        assert_eq!(Dataset::from_csv(&text, 3).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn partitions_are_disjoint_and_exhaustive(k in 2usize..=20, seed in any::<u64>(), extra in 0usize..50) {
            let size = 20 * k + extra;
            prop_assert!(partition_iid(size, k, seed).unwrap().is_valid_over(size));
            let labels: Vec<usize> = (0..size).map(|i| (i * 7 + seed as usize) % 6).collect();
            prop_assert!(partition_noniid(&labels, k, 2, seed).unwrap().is_valid_over(size));
        }

        #[test]
        fn noniid_two_shards_limit_label_support(k in 3usize..=20, c in 5usize..=10, seed in any::<u64>()) {
            prop_assume!(2 * k >= c);
            let labels: Vec<usize> = (0..400).map(|i| i % c).collect();
            let p = partition_noniid(&labels, k, 2, seed).unwrap();
            for shard in &p.shards {
                let distinct: BTreeSet<usize> = shard.iter().map(|&i| labels[i]).collect();
                prop_assert!(distinct.len() <= 3);
            }
        }
    }
}
