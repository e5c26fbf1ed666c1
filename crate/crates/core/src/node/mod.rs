//! The participant state machine: message handling, per-architecture rounds,
//! leadership rotation and proxy relaying.

mod proxy;
mod runtime;

pub use proxy::{proxy_relay, ProxyRelay};
pub use runtime::{LinkEvent, Node, NodeData, NodeReport, NodeUpdate};
pub(crate) use runtime::mix;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::Algorithm;
use crate::comms::{decode_params, CommsError, HeartbeatConfig, Message, ModelsAggregated, MsgType};
use crate::learning::{EvalMetrics, LearningError, ParamVector, TrainerKind, TrainingConfig};
use crate::NodeId;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("invalid node config: {0}")]
    Config(String),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error("nodes unreachable at start: {0:?}")]
    StartFailed(BTreeSet<NodeId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Trainer,
    Aggregator,
    Proxy,
    Server,
    Idle,
}

impl Role {
    pub fn code(self) -> u8 {
        match self {
            Role::Trainer => 0,
            Role::Aggregator => 1,
            Role::Proxy => 2,
            Role::Server => 3,
            Role::Idle => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        [Role::Trainer, Role::Aggregator, Role::Proxy, Role::Server, Role::Idle].get(code as usize).copied()
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", format!("{self:?}").to_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Dfl,
    Sdfl,
    Cfl,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Dfl => "DFL",
            Architecture::Sdfl => "SDFL",
            Architecture::Cfl => "CFL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Idle,
    Training,
    WaitingParams,
    Aggregating,
    Done,
}

impl Phase {
    /// Allowed moves of the round cycle; any phase may fall back to Idle on abort.
    pub fn can_move_to(self, next: Phase) -> bool {
        use Phase::*;
        matches!(
            (self, next),
            (Idle, Training)
                | (Training, WaitingParams)
                | (WaitingParams, Aggregating)
                | (Aggregating, Training)
                | (Aggregating, Done)
                | (_, Idle)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Neighbor {
    pub id: NodeId,
    pub address: String,
}

/// Everything a node needs before start, exchanged as a YAML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: NodeId,
    pub address: String,
    pub role: Role,
    pub architecture: Architecture,
    pub n_nodes: usize,
    pub neighbors: Vec<Neighbor>,
    /// Neighbors this node dials; the rest dial in.
    #[serde(default)]
    pub initiate: Vec<NodeId>,
    pub trainer: TrainerKind,
    pub input_dim: usize,
    pub classes: usize,
    pub training: TrainingConfig,
    pub aggregator: Algorithm,
    pub round_timeout_ms: u64,
    /// Proxy batching window; half the round timeout when absent.
    #[serde(default)]
    pub relay_timeout_ms: Option<u64>,
    #[serde(default)]
    pub heartbeat: HeartbeatConfig,
    pub monitor_period_ms: u64,
    /// Shared seed for the initial model.
    pub model_seed: u64,
    /// Seed for this node's mini-batch order.
    pub train_seed: u64,
    pub ttl: u8,
    /// SDFL leadership order.
    #[serde(default)]
    pub schedule: Vec<NodeId>,
    /// CFL server id; trainers accept the aggregate only from it.
    #[serde(default)]
    pub server: Option<NodeId>,
    /// Where trainers (CFL) and proxies send PARAMS.
    #[serde(default)]
    pub upstream: Option<NodeId>,
    /// Trainers a server or proxy waits for.
    #[serde(default)]
    pub expected: Vec<NodeId>,
    /// Row indices of this node's shard in the scenario dataset.
    #[serde(default)]
    pub shard: Vec<usize>,
    /// Crash right after local training of this round.
    #[serde(default)]
    pub kill_at_round: Option<u32>,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
    /// Upper bound on link establishment before reporting ready.
    #[serde(default = "NodeConfig::default_connect_timeout_ms")]
    pub connect_timeout_ms: u64,
}

impl NodeConfig {
    fn default_connect_timeout_ms() -> u64 {
        10_000
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("node config serializes")
    }

    pub fn from_yaml(text: &str) -> Result<Self, NodeError> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| NodeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NodeError> {
        let bad = |m: String| Err(NodeError::Config(m));
        self.training.validate()?;
        self.heartbeat.validate().map_err(NodeError::Config)?;
        if self.round_timeout_ms == 0 {
            return bad("round timeout must be positive".into());
        }
        if self.neighbors.iter().any(|n| n.id == self.id) {
            return bad(format!("node {} lists itself as a neighbor", self.id));
        }
        let ids: BTreeSet<NodeId> = self.neighbors.iter().map(|n| n.id).collect();
        if let Some(x) = self.initiate.iter().find(|x| !ids.contains(x)) {
            return bad(format!("initiate target {x} is not a neighbor"));
        }
        match (self.architecture, self.role) {
            (Architecture::Sdfl, _) if self.schedule.is_empty() => bad("SDFL needs a leadership schedule".into()),
            (Architecture::Cfl, Role::Trainer) if self.server.is_none() || self.upstream.is_none() => {
                bad("CFL trainers need a server and an upstream".into())
            }
            (_, Role::Proxy) if self.upstream.is_none() => bad("proxies need an upstream".into()),
            _ => Ok(()),
        }
    }

    pub fn round_timeout(&self) -> Duration {
        Duration::from_millis(self.round_timeout_ms)
    }

    pub fn relay_timeout(&self) -> Duration {
        Duration::from_millis(self.relay_timeout_ms.unwrap_or(self.round_timeout_ms / 2))
    }

    pub fn neighbor_address(&self, id: NodeId) -> Option<&str> {
        self.neighbors.iter().find(|n| n.id == id).map(|n| n.address.as_str())
    }
}

/// Hyperparameters announced by the initiator in START_LEARNING.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FederationPlan {
    pub training: TrainingConfig,
    pub round_timeout_ms: u64,
}

impl FederationPlan {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("plan serializes")
    }

    pub fn decode(payload: &[u8]) -> Result<Self, CommsError> {
        serde_json::from_slice(payload).map_err(|e| CommsError::BadPayload(e.to_string()))
    }
}

/// Result of one federation round as seen by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub round: u32,
    pub aggregated: ParamVector,
    /// Parameters after local training, before aggregation (absent for servers).
    pub local: Option<ParamVector>,
    pub contributors: BTreeSet<NodeId>,
    pub elapsed: Duration,
    pub timed_out: bool,
    /// Who aggregated this round.
    pub aggregator: Option<NodeId>,
    /// No parameters arrived at all (CFL server).
    pub aborted: bool,
    pub metrics: Option<EvalMetrics>,
}

/// Mutable protocol state of one participant.
#[derive(Debug, Clone)]
pub struct NodeState {
    pub id: NodeId,
    pub role: Role,
    pub architecture: Architecture,
    pub round: u32,
    pub rounds_total: u32,
    pub params: ParamVector,
    /// PARAMS for the current round, by sender.
    pub pending: BTreeMap<NodeId, ParamVector>,
    /// PARAMS that arrived ahead of this node's round.
    pub early: BTreeMap<u32, BTreeMap<NodeId, ParamVector>>,
    pub phase: Phase,
    pub current_leader: Option<NodeId>,
    /// MODELS_AGGREGATED announcements by round.
    pub aggregated: BTreeMap<u32, (NodeId, ModelsAggregated)>,
    /// MODELS_READY senders by round.
    pub ready: BTreeMap<u32, BTreeSet<NodeId>>,
    /// Senders whose PARAMS were malformed.
    pub flagged: BTreeSet<NodeId>,
}

/// How far ahead of the local round early PARAMS are kept.
pub const EARLY_ROUND_WINDOW: u32 = 2;

/// What a delivered message did to the state.
#[derive(Debug, Clone, PartialEq)]
pub enum Effect {
    Stored { sender: NodeId, round: u32 },
    Buffered { sender: NodeId, round: u32 },
    Stale { sender: NodeId, round: u32 },
    Rejected { sender: NodeId, reason: String },
    Start(FederationPlan),
    StartRejected { phase: Phase },
    Abort,
    Shutdown,
    Ready { sender: NodeId, round: u32 },
    AggregationAnnounced { sender: NodeId, round: u32 },
    LeaderChanged { leader: NodeId },
    RoleChanged(Role),
    Metrics { sender: NodeId },
    Ignored,
}

impl NodeState {
    pub fn new(id: NodeId, role: Role, architecture: Architecture, params: ParamVector, rounds_total: u32) -> Self {
        Self {
            id,
            role,
            architecture,
            round: 0,
            rounds_total,
            params,
            pending: BTreeMap::new(),
            early: BTreeMap::new(),
            phase: Phase::Idle,
            current_leader: None,
            aggregated: BTreeMap::new(),
            ready: BTreeMap::new(),
            flagged: BTreeSet::new(),
        }
    }

    /// Move early arrivals for the current round into `pending` and forget older rounds.
    pub fn absorb_early(&mut self) {
        if let Some(batch) = self.early.remove(&self.round) {
            self.pending.extend(batch);
        }
        let round = self.round;
        self.early.retain(|&r, _| r > round);
    }

    /// Close the current round.
    pub fn advance_round(&mut self) {
        self.pending.clear();
        self.round += 1;
        let round = self.round;
        self.aggregated.retain(|&r, _| r + 1 >= round);
        self.ready.retain(|&r, _| r + 1 >= round);
    }
}

/// Apply one delivered message to `state`.
pub fn handle_message(state: &mut NodeState, msg: &Message) -> Effect {
    match msg.msg_type {
        MsgType::Params => store_params(state, msg),
        MsgType::StartLearning => match FederationPlan::decode(&msg.payload) {
            Ok(plan) if state.phase == Phase::Idle => Effect::Start(plan),
            Ok(_) => Effect::StartRejected { phase: state.phase },
            Err(e) => Effect::Rejected { sender: msg.sender, reason: e.to_string() },
        },
        MsgType::StopLearning => {
            state.phase = Phase::Idle;
            state.pending.clear();
            Effect::Abort
        }
        MsgType::Stop => Effect::Shutdown,
        MsgType::ModelsReady => {
            state.ready.entry(msg.round).or_default().insert(msg.sender);
            Effect::Ready { sender: msg.sender, round: msg.round }
        }
        MsgType::ModelsAggregated => match ModelsAggregated::decode(&msg.payload) {
            Ok(info) => {
                if let Some(next) = info.next_leader {
                    state.current_leader = Some(next);
                }
                state.aggregated.insert(msg.round, (msg.sender, info));
                Effect::AggregationAnnounced { sender: msg.sender, round: msg.round }
            }
            Err(e) => Effect::Rejected { sender: msg.sender, reason: e.to_string() },
        },
        MsgType::Leadership => match msg.payload.as_slice() {
            [lo, hi] => {
                let leader = NodeId::from_le_bytes([*lo, *hi]);
                state.current_leader = Some(leader);
                if state.architecture == Architecture::Sdfl {
                    state.role = if leader == state.id { Role::Aggregator } else { Role::Trainer };
                }
                Effect::LeaderChanged { leader }
            }
            _ => Effect::Rejected { sender: msg.sender, reason: "LEADERSHIP payload must be 2 bytes".into() },
        },
        MsgType::Role => match msg.payload.first().copied().and_then(Role::from_code) {
            Some(role) => {
                state.role = role;
                Effect::RoleChanged(role)
            }
            None => Effect::Rejected { sender: msg.sender, reason: "unknown role code".into() },
        },
        MsgType::Metrics => Effect::Metrics { sender: msg.sender },
        MsgType::Beat | MsgType::ConnectTo => Effect::Ignored,
    }
}

fn store_params(state: &mut NodeState, msg: &Message) -> Effect {
    let values = match decode_params(&msg.payload) {
        Ok(v) => v,
        Err(e) => {
            state.flagged.insert(msg.sender);
            return Effect::Rejected { sender: msg.sender, reason: e.to_string() };
        }
    };
    if values.len() != state.params.len() {
        state.flagged.insert(msg.sender);
        return Effect::Rejected {
            sender: msg.sender,
            reason: format!("shape mismatch: expected {} values, got {}", state.params.len(), values.len()),
        };
    }
    let params = state.params.with_values(values).expect("length checked");
    if msg.round < state.round {
        return Effect::Stale { sender: msg.sender, round: msg.round };
    }
    if msg.round > state.round {
        if msg.round > state.round + EARLY_ROUND_WINDOW {
            return Effect::Stale { sender: msg.sender, round: msg.round };
        }
        state.early.entry(msg.round).or_default().insert(msg.sender, params);
        return Effect::Buffered { sender: msg.sender, round: msg.round };
    }
    state.pending.insert(msg.sender, params);
    Effect::Stored { sender: msg.sender, round: msg.round }
}

/// Next SDFL leader after `current`, skipping nodes known to be dead.
/// Falls back to `current` when every other entry is dead.
pub fn sdfl_rotate(schedule: &[NodeId], current: NodeId, dead: &BTreeSet<NodeId>) -> NodeId {
    if schedule.is_empty() {
        return current;
    }
    let start = schedule.iter().position(|&x| x == current).unwrap_or(schedule.len() - 1);
    (1..=schedule.len())
        .map(|k| schedule[(start + k) % schedule.len()])
        .find(|x| !dead.contains(x))
        .unwrap_or(current)
}
