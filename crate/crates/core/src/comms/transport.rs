use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use serde::Serialize;

use super::CommsError;
use crate::NodeId;

/// Out-of-band instructions injected into a node's queue by its owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlSignal {
    /// Begin the federation (originator only).
    Start,
    /// Graceful shutdown.
    Stop,
    /// Abrupt crash: drop everything without notifying peers.
    Kill,
}

#[derive(Debug)]
pub enum Incoming {
    Frame { from: NodeId, bytes: Vec<u8> },
    Closed { peer: NodeId },
    Control(ControlSignal),
}

/// Per-node traffic counters shared with the transport's worker threads.
#[derive(Debug, Default)]
pub struct CommCounters {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    latency_total_us: AtomicU64,
    latency_samples: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct CounterSnapshot {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    /// Mean enqueue-to-delivery latency in milliseconds.
    pub mean_send_latency_ms: f64,
}

impl CommCounters {
    pub fn record_sent(&self, bytes: usize, latency: Duration) {
        self.bytes_sent.fetch_add(bytes as u64, Ordering::Relaxed);
        self.frames_sent.fetch_add(1, Ordering::Relaxed);
        self.latency_total_us.fetch_add(latency.as_micros() as u64, Ordering::Relaxed);
        self.latency_samples.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_received(&self, bytes: usize) {
        self.bytes_received.fetch_add(bytes as u64, Ordering::Relaxed);
        self.frames_received.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        let samples = self.latency_samples.load(Ordering::Relaxed);
        let total = self.latency_total_us.load(Ordering::Relaxed);
        CounterSnapshot {
            bytes_sent: self.bytes_sent.load(Ordering::Relaxed),
            bytes_received: self.bytes_received.load(Ordering::Relaxed),
            frames_sent: self.frames_sent.load(Ordering::Relaxed),
            frames_received: self.frames_received.load(Ordering::Relaxed),
            mean_send_latency_ms: if samples == 0 { 0.0 } else { total as f64 / samples as f64 / 1000.0 },
        }
    }
}

/// A point-to-point byte carrier. Frames arrive on [`Transport::incoming`]
/// together with control signals, so a node has a single queue to drain.
pub trait Transport: Send {
    fn id(&self) -> NodeId;
    fn address(&self) -> &str;
    /// Establish a channel to `peer` at `address`.
    fn open(&mut self, peer: NodeId, address: &str) -> Result<(), CommsError>;
    fn is_open(&self, peer: NodeId) -> bool;
    fn send(&mut self, peer: NodeId, frame: Vec<u8>) -> Result<(), CommsError>;
    fn close(&mut self, peer: NodeId);
    fn incoming(&self) -> &Receiver<Incoming>;
    /// Handle for injecting control signals into this node's queue.
    fn control(&self) -> Sender<Incoming>;
    fn counters(&self) -> Arc<CommCounters>;
    /// Tear down every channel and stop worker threads.
    fn shutdown(&mut self);
}
