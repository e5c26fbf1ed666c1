//! Scenario definition, deployment of a local federation and result collection.

mod deploy;
mod report;
mod scenario;

pub use deploy::{build_node_configs, deploy, partition_scenario, run_scenario, Deployment, ScenarioResult};
pub use report::{summarize_records, NodeSummary, RecordSummary, ScenarioReport, TimelinePoint};
pub use scenario::{
    load_scenario, DatasetSpec, FaultSpec, PartitionSpec, ScenarioConfig, TopologyName, TopologySpec, TrainerSpec,
    TransportSpec,
};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::NodeId;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("{0}")]
    UnknownField(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("deployment failed: {0}")]
    DeployFailed(String),
    #[error("nodes could not be reached at start: {0:?}")]
    StartFailed(BTreeSet<NodeId>),
}

impl ControllerError {
    /// Errors caused by the scenario document rather than the run.
    pub fn is_validation(&self) -> bool {
        matches!(self, ControllerError::Parse(_) | ControllerError::UnknownField(_) | ControllerError::InvalidScenario(_))
    }
}
