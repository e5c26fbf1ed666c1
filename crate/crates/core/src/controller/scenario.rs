use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ControllerError;
use crate::aggregation::Algorithm;
use crate::comms::HeartbeatConfig;
use crate::data::{self, Dataset, DEFAULT_TEST_FRACTION};
use crate::learning::{TrainerKind, TrainingConfig};
use crate::node::Architecture;
use crate::topology::Topology;
use crate::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyName {
    Fully,
    Star,
    Ring,
    Random,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub kind: TopologyName,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub center: Option<usize>,
    /// Adjacency file for `custom`; relative paths resolve against the scenario file.
    #[serde(default)]
    pub file: Option<PathBuf>,
}

impl TopologySpec {
    pub fn build(&self, fallback_seed: u64) -> Result<Topology, ControllerError> {
        let invalid = |e: crate::topology::TopologyError| ControllerError::InvalidScenario(format!("topology: {e}"));
        let need_n = || self.n.ok_or_else(|| ControllerError::InvalidScenario("topology needs `n`".into()));
        let topo = match self.kind {
            TopologyName::Fully => Topology::fully_connected(need_n()?).map_err(invalid)?,
            TopologyName::Star => Topology::star(need_n()?, self.center.unwrap_or(0)).map_err(invalid)?,
            TopologyName::Ring => Topology::ring(need_n()?).map_err(invalid)?,
            TopologyName::Random => {
                let p = self.p.ok_or_else(|| ControllerError::InvalidScenario("random topology needs `p`".into()))?;
                Topology::random_connected(need_n()?, p, self.seed.unwrap_or(fallback_seed)).map_err(invalid)?
            }
            TopologyName::Custom => {
                let file = self
                    .file
                    .as_ref()
                    .ok_or_else(|| ControllerError::InvalidScenario("custom topology needs `file`".into()))?;
                let topo = Topology::load(file).map_err(invalid)?;
                if let Some(n) = self.n {
                    if n != topo.n() {
                        return Err(ControllerError::InvalidScenario(format!(
                            "topology file has {} nodes but n = {n}",
                            topo.n()
                        )));
                    }
                }
                topo
            }
        };
        Ok(topo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "defaults::samples")]
        samples: usize,
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::dim")]
        dim: usize,
        #[serde(default = "defaults::spread")]
        spread: f64,
    },
    Anomaly {
        #[serde(default = "defaults::normal")]
        normal: usize,
        #[serde(default = "defaults::anomalous")]
        anomalous: usize,
        #[serde(default = "defaults::anomaly_dim")]
        dim: usize,
    },
}

impl DatasetSpec {
    pub fn generate(&self, seed: u64) -> Result<Dataset, ControllerError> {
        let invalid = |e: data::DataError| ControllerError::InvalidScenario(format!("dataset: {e}"));
        match *self {
            DatasetSpec::Blobs { samples, classes, dim, spread } => {
                data::synthetic_blobs(samples, classes, dim, spread, seed).map_err(invalid)
            }
            DatasetSpec::Anomaly { normal, anomalous, dim } => {
                data::synthetic_anomaly(normal, anomalous, dim, seed).map_err(invalid)
            }
        }
    }

    pub fn rows(&self) -> usize {
        match *self {
            DatasetSpec::Blobs { samples, .. } => samples,
            DatasetSpec::Anomaly { normal, anomalous, .. } => normal + anomalous,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            DatasetSpec::Blobs { classes, .. } => classes,
            DatasetSpec::Anomaly { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub kind: String,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    Noniid {
        #[serde(alias = "s")]
        shards_per_client: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TransportSpec {
    Inproc,
    /// Port `base_port + id` per node; 0 lets the OS choose.
    Tcp { base_port: u16 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub node: NodeId,
    pub kill_at_round: u32,
}

mod defaults {
    use super::*;

    pub fn samples() -> usize {
        800
    }
    pub fn classes() -> usize {
        4
    }
    pub fn dim() -> usize {
        2
    }
    pub fn spread() -> f64 {
        0.6
    }
    pub fn normal() -> usize {
        900
    }
    pub fn anomalous() -> usize {
        300
    }
    pub fn anomaly_dim() -> usize {
        8
    }
    pub fn hidden() -> usize {
        16
    }
    pub fn alpha() -> f64 {
        TrainingConfig::default().alpha
    }
    pub fn lambda() -> f64 {
        TrainingConfig::default().lambda
    }
    pub fn batch_size() -> usize {
        TrainingConfig::default().batch_size
    }
    pub fn rounds() -> usize {
        10
    }
    pub fn epochs() -> usize {
        20
    }
    pub fn round_timeout_s() -> f64 {
        30.0
    }
    pub fn monitor_period_s() -> f64 {
        5.0
    }
    pub fn aggregator() -> Algorithm {
        Algorithm::FedAvg
    }
    pub fn partition() -> PartitionSpec {
        PartitionSpec::Iid
    }
    pub fn transport() -> TransportSpec {
        TransportSpec::Inproc
    }
    pub fn test_fraction() -> f64 {
        DEFAULT_TEST_FRACTION
    }
    pub fn f1_target() -> f64 {
        0.9
    }
}

/// A complete experiment definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub architecture: Architecture,
    pub topology: TopologySpec,
    pub dataset: DatasetSpec,
    pub trainer: TrainerSpec,
    #[serde(default = "defaults::aggregator")]
    pub aggregator: Algorithm,
    #[serde(default = "defaults::partition")]
    pub partition: PartitionSpec,
    #[serde(default = "defaults::rounds")]
    pub rounds: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::round_timeout_s")]
    pub round_timeout_s: f64,
    #[serde(default = "defaults::monitor_period_s")]
    pub monitor_period_s: f64,
    #[serde(default = "defaults::transport")]
    pub transport: TransportSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::test_fraction")]
    pub test_fraction: f64,
    /// F1 level used for time-to-threshold.
    #[serde(default = "defaults::f1_target")]
    pub f1_target: f64,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    /// SDFL leadership order; ascending ids when absent.
    #[serde(default)]
    pub schedule: Option<Vec<NodeId>>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

impl ScenarioConfig {
    pub fn from_yaml(text: &str) -> Result<Self, ControllerError> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| {
            let msg = e.to_string();
            if msg.contains("unknown field") || msg.contains("unknown variant") {
                ControllerError::UnknownField(msg)
            } else {
                ControllerError::Parse(msg)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("scenario serializes")
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.epochs,
            alpha: self.trainer.alpha,
            lambda: self.trainer.lambda,
            rounds: self.rounds,
            batch_size: self.trainer.batch_size,
        }
    }

    pub fn trainer_kind(&self) -> Result<TrainerKind, ControllerError> {
        TrainerKind::from_name(&self.trainer.kind, self.trainer.hidden)
            .map_err(|e| ControllerError::InvalidScenario(e.to_string()))
    }

    pub fn topology(&self) -> Result<Topology, ControllerError> {
        self.topology.build(self.seed)
    }

    /// CFL server id (the star center).
    pub fn server(&self) -> Option<NodeId> {
        (self.architecture == Architecture::Cfl).then(|| self.topology.center.unwrap_or(0) as NodeId)
    }

    pub fn schedule(&self, n: usize) -> Vec<NodeId> {
        self.schedule.clone().unwrap_or_else(|| (0..n as NodeId).collect())
    }

    pub fn round_timeout_ms(&self) -> u64 {
        (self.round_timeout_s * 1000.0).round() as u64
    }

    /// Bound on the whole run: three times rounds × round timeout.
    pub fn global_timeout_ms(&self) -> u64 {
        3 * self.rounds as u64 * self.round_timeout_ms()
    }

    /// Nodes that hold data and train.
    pub fn data_nodes(&self, n: usize) -> Vec<NodeId> {
        let server = self.server();
        (0..n as NodeId).filter(|&i| Some(i) != server).collect()
    }

    /// Smallest number of vectors any aggregation in this scenario will see.
    fn min_aggregation_set(&self, topo: &Topology) -> usize {
        let n = topo.n();
        match self.architecture {
            Architecture::Dfl => (0..n).map(|i| topo.degree(i) + 1).min().unwrap_or(1),
            Architecture::Sdfl => n,
            Architecture::Cfl => n - 1,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: String| Err(ControllerError::InvalidScenario(m));
        if self.name.trim().is_empty() {
            return bad("name must not be empty".into());
        }
        let topo = self.topology()?;
        let n = topo.n();
        if n < 2 {
            return bad(format!("a federation needs at least 2 nodes, got {n}"));
        }
        if n > 255 {
            return bad(format!("at most 255 nodes are supported (hop budget is one byte), got {n}"));
        }
        if self.rounds == 0 || self.epochs == 0 {
            return bad("rounds and epochs must be positive".into());
        }
        if !(self.round_timeout_s.is_finite() && self.round_timeout_s > 0.0) {
            return bad("round_timeout_s must be positive".into());
        }
        if !(self.monitor_period_s.is_finite() && self.monitor_period_s > 0.0) {
            return bad("monitor_period_s must be positive".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if !(0.0..=1.0).contains(&self.f1_target) {
            return bad(format!("f1_target must lie in [0, 1], got {}", self.f1_target));
        }
        self.heartbeat.validate().map_err(ControllerError::InvalidScenario)?;
        self.training().validate().map_err(|e| ControllerError::InvalidScenario(e.to_string()))?;
        let kind = self.trainer_kind()?;
        if kind.is_anomaly_detector() != matches!(self.dataset, DatasetSpec::Anomaly { .. }) {
            return bad(format!("trainer `{}` does not fit dataset `{:?}`", self.trainer.kind, self.dataset_kind()));
        }

        match self.architecture {
            Architecture::Cfl => {
                let center = self.topology.center.unwrap_or(0);
                if self.topology.kind != TopologyName::Star {
                    return bad("CFL requires a star topology with the server at its center".into());
                }
                if center >= n {
                    return bad(format!("star center {center} out of range"));
                }
            }
            Architecture::Sdfl => {
                let schedule = self.schedule(n);
                let ids: BTreeSet<NodeId> = schedule.iter().copied().collect();
                if schedule.is_empty() || ids.len() != schedule.len() {
                    return bad("SDFL schedule must be non-empty without repeats".into());
                }
                if let Some(x) = schedule.iter().find(|&&x| x as usize >= n) {
                    return bad(format!("SDFL schedule names node {x}, which does not exist"));
                }
            }
            Architecture::Dfl => {}
        }
        if self.schedule.is_some() && self.architecture != Architecture::Sdfl {
            return bad("a leadership schedule only applies to SDFL".into());
        }

        let m = self.min_aggregation_set(&topo);
        match self.aggregator {
            Algorithm::Krum { f } if m < 2 * f + 3 => {
                return bad(format!("krum with f={f} needs at least {} vectors per aggregation, scenario gives {m}", 2 * f + 3))
            }
            Algorithm::TrimmedMean { k_trim } if m <= 2 * k_trim => {
                return bad(format!("trimmed_mean with k_trim={k_trim} needs more than {} vectors, scenario gives {m}", 2 * k_trim))
            }
            _ => {}
        }

        let holders = self.data_nodes(n).len();
        let rows = self.dataset.rows();
        if rows < holders * 2 {
            return bad(format!("{rows} samples cannot feed {holders} data-holding nodes"));
        }
        if let PartitionSpec::Noniid { shards_per_client } = self.partition {
            if shards_per_client == 0 || holders * shards_per_client > rows {
                return bad(format!("non-IID partition with s={shards_per_client} is infeasible for {rows} rows"));
            }
        }
        if let TransportSpec::Tcp { base_port } = self.transport {
            if base_port != 0 && base_port as usize + n > 65_535 {
                return bad(format!("tcp ports {base_port}..{} exceed 65535", base_port as usize + n));
            }
        }
        for fault in &self.faults {
            if fault.node as usize >= n {
                return bad(format!("fault names node {}, which does not exist", fault.node));
            }
            if fault.kill_at_round as usize >= self.rounds {
                return bad(format!("fault round {} is past the last round", fault.kill_at_round));
            }
            if Some(fault.node) == self.server() {
                return bad("killing the CFL server leaves nothing to measure".into());
            }
        }
        Ok(())
    }

    fn dataset_kind(&self) -> &'static str {
        match self.dataset {
            DatasetSpec::Blobs { .. } => "blobs",
            DatasetSpec::Anomaly { .. } => "anomaly",
        }
    }
}

/// Read, parse and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig, ControllerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| ControllerError::Io(format!("{}: {e}", path.display())))?;
    let mut cfg: ScenarioConfig = serde_yaml::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown field") || msg.contains("unknown variant") {
            ControllerError::UnknownField(msg)
        } else {
            ControllerError::Parse(msg)
        }
    })?;
    if let Some(file) = cfg.topology.file.as_mut() {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}
