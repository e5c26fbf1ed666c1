use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use crate::comms::Message;
use crate::NodeId;

#[derive(Debug)]
struct Batch {
    opened: Instant,
    buffered: BTreeMap<NodeId, Message>,
    flushed: bool,
}

/// Batches downstream PARAMS per round and releases them upstream, untouched,
/// once every expected trainer has reported or the relay window closes.
#[derive(Debug)]
pub struct ProxyRelay {
    expected: BTreeSet<NodeId>,
    timeout: Duration,
    batches: BTreeMap<u32, Batch>,
}

/// Rounds of history kept for late arrivals.
const KEEP_ROUNDS: u32 = 4;

impl ProxyRelay {
    pub fn new(expected: impl IntoIterator<Item = NodeId>, timeout: Duration) -> Self {
        Self { expected: expected.into_iter().collect(), timeout, batches: BTreeMap::new() }
    }

    /// Accept one PARAMS message; returns whatever should go upstream now.
    pub fn offer(&mut self, msg: Message, now: Instant) -> Vec<Message> {
        let round = msg.round;
        let batch = self.batches.entry(round).or_insert_with(|| Batch { opened: now, buffered: BTreeMap::new(), flushed: false });
        if batch.flushed {
            return vec![msg];
        }
        batch.buffered.insert(msg.sender, msg);
        let complete = self.expected.iter().all(|id| batch.buffered.contains_key(id));
        let out = if complete { Self::flush(batch) } else { Vec::new() };
        self.batches.retain(|&r, _| r + KEEP_ROUNDS >= round);
        out
    }

    /// Release batches whose window has closed.
    pub fn expire(&mut self, now: Instant) -> Vec<Message> {
        let timeout = self.timeout;
        self.batches
            .values_mut()
            .filter(|b| !b.flushed && now >= b.opened + timeout)
            .flat_map(Self::flush)
            .collect()
    }

    pub fn next_deadline(&self) -> Option<Instant> {
        self.batches.values().filter(|b| !b.flushed).map(|b| b.opened + self.timeout).min()
    }

    fn flush(batch: &mut Batch) -> Vec<Message> {
        batch.flushed = true;
        std::mem::take(&mut batch.buffered).into_values().collect()
    }
}

/// One-shot form: forward the whole buffered batch when complete or timed out.
pub fn proxy_relay(expected: &BTreeSet<NodeId>, buffered: &[Message], timed_out: bool) -> Vec<Message> {
    let have: BTreeSet<NodeId> = buffered.iter().map(|m| m.sender).collect();
    if timed_out || expected.is_subset(&have) {
        buffered.to_vec()
    } else {
        Vec::new()
    }
}
