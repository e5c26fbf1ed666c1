use std::collections::{BTreeSet, HashSet, VecDeque};

use super::Message;
use crate::NodeId;

pub const DEFAULT_SEEN_CAPACITY: usize = 65_536;

/// Bounded set of message ids with insertion-order eviction.
#[derive(Debug, Clone)]
pub struct SeenSet {
    order: VecDeque<u128>,
    ids: HashSet<u128>,
    capacity: usize,
}

impl SeenSet {
    pub fn new(capacity: usize) -> Self {
        Self { order: VecDeque::new(), ids: HashSet::new(), capacity: capacity.max(1) }
    }

    pub fn contains(&self, id: u128) -> bool {
        self.ids.contains(&id)
    }

    /// Returns false if the id was already present.
    pub fn insert(&mut self, id: u128) -> bool {
        if !self.ids.insert(id) {
            return false;
        }
        self.order.push_back(id);
        while self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.ids.remove(&old);
            }
        }
        true
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl Default for SeenSet {
    fn default() -> Self {
        Self::new(DEFAULT_SEEN_CAPACITY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub deliver: bool,
    pub forward_to: BTreeSet<NodeId>,
    /// The copy to relay (ttl already decremented), when `forward_to` is non-empty.
    pub forwarded: Option<Message>,
}

/// Deduplicate and decide where a received message goes next.
pub fn on_receive(msg: &Message, from: NodeId, seen: &mut SeenSet, neighbors: &BTreeSet<NodeId>) -> Decision {
    if !seen.insert(msg.msg_id) {
        return Decision { deliver: false, forward_to: BTreeSet::new(), forwarded: None };
    }
    if !msg.is_forwarding() || msg.ttl == 0 {
        return Decision { deliver: true, forward_to: BTreeSet::new(), forwarded: None };
    }
    let forward_to: BTreeSet<NodeId> = neighbors.iter().copied().filter(|&n| n != from).collect();
    let forwarded = (!forward_to.is_empty()).then(|| Message { ttl: msg.ttl - 1, ..msg.clone() });
    Decision { deliver: true, forward_to, forwarded }
}
