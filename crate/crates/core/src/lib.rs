//! Decentralized federated learning engine and simulator.
//!
//! Participant nodes train local models, exchange parameters over an
//! arbitrary topology under DFL, SDFL or CFL architectures, aggregate with
//! FedAvg or a robust rule, and report per-node KPIs.

pub mod aggregation;
pub mod comms;
pub mod controller;
pub mod data;
pub mod learning;
pub mod monitoring;
pub mod node;
pub mod topology;

/// Node identity: the topology row index (16 bits on the wire).
pub type NodeId = u16;
