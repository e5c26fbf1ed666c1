//! Federation network topologies as undirected graphs.
//!
//! A [`Topology`] is a symmetric 0/1 adjacency matrix with a zero diagonal.
//! Node identity is the row index; mapping indices to transport addresses is
//! the controller's job.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

/// Consecutive disconnected G(n,p) draws tolerated before giving up.
pub const MAX_RANDOM_ATTEMPTS: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("invalid topology size {n}: {reason}")]
    InvalidSize { n: usize, reason: &'static str },
    #[error("node index {index} out of range for {n} nodes")]
    InvalidIndex { index: usize, n: usize },
    #[error("invalid edge probability {0}")]
    InvalidProbability(String),
    #[error("no connected sample after {attempts} attempts (p too small for n)")]
    GenerationFailed { attempts: usize },
    #[error("adjacency matrix is not symmetric at ({0}, {1})")]
    NotSymmetric(usize, usize),
    #[error("self loop at node {0}")]
    SelfLoop(usize),
    #[error("graph is disconnected (node {0} unreachable from node 0)")]
    Disconnected(usize),
    #[error("adjacency entries must be 0 or 1, found {value} at ({row}, {col})")]
    InvalidEntry { row: usize, col: usize, value: u8 },
    #[error("malformed topology file: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    FullyConnected,
    Star { center: usize },
    Ring,
    Random,
    Custom,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::FullyConnected => write!(f, "fully"),
            TopologyKind::Star { center } => write!(f, "star(center={center})"),
            TopologyKind::Ring => write!(f, "ring"),
            TopologyKind::Random => write!(f, "random"),
            TopologyKind::Custom => write!(f, "custom"),
        }
    }
}

/// Undirected federation graph. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    n: usize,
    adj: Vec<Vec<u8>>,
    kind: TopologyKind,
}

impl Topology {
    pub fn fully_connected(n: usize) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::InvalidSize { n, reason: "need at least one node" });
        }
        let adj = (0..n)
            .map(|i| (0..n).map(|j| u8::from(i != j)).collect())
            .collect();
        Ok(Self { n, adj, kind: TopologyKind::FullyConnected })
    }

    pub fn star(n: usize, center: usize) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::InvalidSize { n, reason: "a star needs at least two nodes" });
        }
        if center >= n {
            return Err(TopologyError::InvalidIndex { index: center, n });
        }
        let mut adj = vec![vec![0u8; n]; n];
        for i in (0..n).filter(|&i| i != center) {
            adj[i][center] = 1;
            adj[center][i] = 1;
        }
        Ok(Self { n, adj, kind: TopologyKind::Star { center } })
    }

    pub fn ring(n: usize) -> Result<Self, TopologyError> {
        if n < 3 {
            return Err(TopologyError::InvalidSize { n, reason: "a ring needs at least three nodes" });
        }
        let mut adj = vec![vec![0u8; n]; n];
        for i in 0..n {
            let next = (i + 1) % n;
            adj[i][next] = 1;
            adj[next][i] = 1;
        }
        Ok(Self { n, adj, kind: TopologyKind::Ring })
    }

    /// Erdős–Rényi G(n, p) conditioned on connectivity by resampling.
    pub fn random_connected(n: usize, p: f64, seed: u64) -> Result<Self, TopologyError> {
        if n < 2 {
            return Err(TopologyError::InvalidSize { n, reason: "random topology needs at least two nodes" });
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(TopologyError::InvalidProbability(p.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_RANDOM_ATTEMPTS {
            let mut adj = vec![vec![0u8; n]; n];
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.random::<f64>() < p {
                        adj[i][j] = 1;
                        adj[j][i] = 1;
                    }
                }
            }
            let t = Self { n, adj, kind: TopologyKind::Random };
            if t.is_connected() {
                return Ok(t);
            }
        }
        Err(TopologyError::GenerationFailed { attempts: MAX_RANDOM_ATTEMPTS })
    }

    /// Validates a user-supplied adjacency matrix.
    pub fn from_custom(adj: Vec<Vec<u8>>) -> Result<Self, TopologyError> {
        let n = adj.len();
        if n == 0 {
            return Err(TopologyError::InvalidSize { n, reason: "empty matrix" });
        }
        for (i, row) in adj.iter().enumerate() {
            if row.len() != n {
                return Err(TopologyError::Parse(format!("row {i} has {} entries, expected {n}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(TopologyError::InvalidEntry { row: i, col: j, value: v });
                }
            }
        }
        for i in 0..n {
            if adj[i][i] != 0 {
                return Err(TopologyError::SelfLoop(i));
            }
            for j in (i + 1)..n {
                if adj[i][j] != adj[j][i] {
                    return Err(TopologyError::NotSymmetric(i, j));
                }
            }
        }
        let t = Self { n, adj, kind: TopologyKind::Custom };
        if let Some(missing) = t.first_unreachable() {
            return Err(TopologyError::Disconnected(missing));
        }
        Ok(t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adj
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && self.adj[i][j] == 1
    }

    /// Neighbors of `i` in ascending order.
    pub fn neighbors(&self, i: usize) -> Result<Vec<NodeId>, TopologyError> {
        if i >= self.n {
            return Err(TopologyError::InvalidIndex { index: i, n: self.n });
        }
        Ok(self.adj[i]
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1)
            .map(|(j, _)| j as NodeId)
            .collect())
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adj.get(i).map_or(0, |row| row.iter().filter(|&&v| v == 1).count())
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(|row| row.iter().filter(|&&v| v == 1).count()).sum::<usize>() / 2
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.adj[i][j] == 1 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.first_unreachable().is_none()
    }

    /// Hop distances from `src` (None for unreachable nodes).
    pub fn bfs_distances(&self, src: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        if src >= self.n {
            return dist;
        }
        dist[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].unwrap_or(0);
            for v in 0..self.n {
                if self.adj[u][v] == 1 && dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }

    /// Longest shortest path; None when disconnected.
    pub fn diameter(&self) -> Option<usize> {
        let mut best = 0;
        for s in 0..self.n {
            for d in self.bfs_distances(s) {
                best = best.max(d?);
            }
        }
        Some(best)
    }

    fn first_unreachable(&self) -> Option<usize> {
        self.bfs_distances(0).iter().position(Option::is_none)
    }

    /// Plain-text form: first line `n`, then `n` rows of space-separated 0/1.
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for row in &self.adj {
            let line: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TopologyError> {
        std::fs::write(path, self.to_text()).map_err(|e| TopologyError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::Io(e.to_string()))?;
        text.parse()
    }
}

impl FromStr for Topology {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| TopologyError::Parse("missing node count".into()))?
            .parse()
            .map_err(|e| TopologyError::Parse(format!("node count: {e}")))?;
        let mut adj = Vec::with_capacity(n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| TopologyError::Parse(format!("missing row {i}")))?;
            let row = line
                .split_whitespace()
                .map(|tok| tok.parse::<u8>().map_err(|e| TopologyError::Parse(format!("row {i}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            adj.push(row);
        }
        if lines.next().is_some() {
            return Err(TopologyError::Parse(format!("more than {n} rows")));
        }
        Self::from_custom(adj)
    }
}
