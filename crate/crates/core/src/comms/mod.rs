//! Message vocabulary, wire codec, flood forwarding, heartbeat liveness and
//! the transports that carry frames between nodes.

mod codec;
mod endpoint;
mod flood;
mod heartbeat;
pub mod inproc;
pub mod tcp;
mod transport;

pub use codec::{
    decode, decode_frame, decode_params, encode, encode_params, read_frame, ConnectTo, ModelsAggregated, FRAME_PREFIX,
    HEADER_LEN, MAX_PAYLOAD,
};
pub use endpoint::{Endpoint, Event};
pub use flood::{on_receive, Decision, SeenSet, DEFAULT_SEEN_CAPACITY};
pub use heartbeat::{heartbeat_tick, update_liveness, HeartbeatConfig, LinkState, PeerLink, StateChange};
pub use transport::{CommCounters, ControlSignal, CounterSnapshot, Incoming, Transport};

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::NodeId;

pub const PROTOCOL_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommsError {
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    PayloadTooLarge(usize),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("protocol version {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    BadPayload(String),
    #[error("could not connect to {address}: {reason}")]
    ConnectFailed { address: String, reason: String },
    #[error("already connected to node {0}")]
    AlreadyConnected(NodeId),
    #[error("address {0} already bound")]
    AddressInUse(String),
    #[error("no link to node {0}")]
    NotConnected(NodeId),
    #[error("peer {0} is gone")]
    PeerGone(NodeId),
    #[error("io error: {0}")]
    Io(String),
}

/// Message vocabulary. Discriminants are the wire codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum MsgType {
    ConnectTo = 0,
    Beat = 1,
    Role = 2,
    Metrics = 3,
    Leadership = 4,
    StartLearning = 5,
    StopLearning = 6,
    Params = 7,
    Stop = 8,
    ModelsReady = 9,
    ModelsAggregated = 10,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::ConnectTo,
        MsgType::Beat,
        MsgType::Role,
        MsgType::Metrics,
        MsgType::Leadership,
        MsgType::StartLearning,
        MsgType::StopLearning,
        MsgType::Params,
        MsgType::Stop,
        MsgType::ModelsReady,
        MsgType::ModelsAggregated,
    ];

    pub fn from_code(code: u8) -> Result<Self, CommsError> {
        Self::ALL.get(code as usize).copied().ok_or(CommsError::UnknownType(code))
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Whether relays re-send this type to their other neighbors.
    pub fn is_forwarding(self) -> bool {
        matches!(
            self,
            MsgType::StartLearning
                | MsgType::StopLearning
                | MsgType::Params
                | MsgType::Stop
                | MsgType::ModelsReady
                | MsgType::ModelsAggregated
        )
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MsgType::ConnectTo => "CONNECT_TO",
            MsgType::Beat => "BEAT",
            MsgType::Role => "ROLE",
            MsgType::Metrics => "METRICS",
            MsgType::Leadership => "LEADERSHIP",
            MsgType::StartLearning => "START_LEARNING",
            MsgType::StopLearning => "STOP_LEARNING",
            MsgType::Params => "PARAMS",
            MsgType::Stop => "STOP",
            MsgType::ModelsReady => "MODELS_READY",
            MsgType::ModelsAggregated => "MODELS_AGGREGATED",
        };
        f.write_str(name)
    }
}

/// One protocol unit. Forwarded copies keep `msg_id` and `sender` and lose one `ttl`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub version: u8,
    pub msg_type: MsgType,
    pub sender: NodeId,
    pub round: u32,
    pub msg_id: u128,
    pub ttl: u8,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(msg_type: MsgType, sender: NodeId, round: u32, msg_id: u128, ttl: u8, payload: Vec<u8>) -> Self {
        Self { version: PROTOCOL_VERSION, msg_type, sender, round, msg_id, ttl, payload }
    }

    pub fn is_forwarding(&self) -> bool {
        self.msg_type.is_forwarding()
    }

    /// Encoded frame size in bytes.
    pub fn frame_len(&self) -> usize {
        FRAME_PREFIX + HEADER_LEN + self.payload.len()
    }
}
