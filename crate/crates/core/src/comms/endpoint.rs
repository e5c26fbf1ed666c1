use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::time::Instant;

use crossbeam_channel::{RecvTimeoutError, Sender};

use super::heartbeat::update_liveness;
use super::{
    decode, encode, on_receive, CommCounters, CommsError, ConnectTo, ControlSignal, HeartbeatConfig, Incoming,
    LinkState, Message, MsgType, PeerLink, SeenSet, StateChange, Transport,
};
use crate::NodeId;

#[derive(Debug)]
pub enum Event {
    /// A message for the application layer (already forwarded if needed).
    Message { msg: Message, from: NodeId },
    Link(StateChange),
    Control(ControlSignal),
    /// A frame or instruction that could not be processed.
    Error { from: Option<NodeId>, error: CommsError },
}

/// A node's network face: links, dedup, flooding and heartbeats over one transport.
pub struct Endpoint {
    id: NodeId,
    transport: Box<dyn Transport>,
    links: BTreeMap<NodeId, PeerLink>,
    seen: SeenSet,
    hb: HeartbeatConfig,
    next_beat: Instant,
    nonce: u64,
    counter: u64,
    ready: VecDeque<Event>,
}

impl Endpoint {
    /// `nonce` disambiguates message ids across restarts of the same node id.
    pub fn new(transport: Box<dyn Transport>, hb: HeartbeatConfig, nonce: u64) -> Self {
        Self {
            id: transport.id(),
            transport,
            links: BTreeMap::new(),
            seen: SeenSet::default(),
            hb,
            next_beat: Instant::now() + hb.period(),
            nonce,
            counter: 0,
            ready: VecDeque::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn address(&self) -> &str {
        self.transport.address()
    }

    pub fn heartbeat(&self) -> &HeartbeatConfig {
        &self.hb
    }

    pub fn links(&self) -> impl Iterator<Item = &PeerLink> {
        self.links.values()
    }

    pub fn link_state(&self, peer: NodeId) -> Option<LinkState> {
        self.links.get(&peer).map(|l| l.state)
    }

    /// Neighbors whose link is not dead.
    pub fn live_neighbors(&self) -> BTreeSet<NodeId> {
        self.links.values().filter(|l| l.is_live()).map(|l| l.peer).collect()
    }

    pub fn alive_neighbors(&self) -> BTreeSet<NodeId> {
        self.links.values().filter(|l| l.state == LinkState::Alive).map(|l| l.peer).collect()
    }

    pub fn counters(&self) -> Arc<CommCounters> {
        self.transport.counters()
    }

    pub fn control(&self) -> Sender<Incoming> {
        self.transport.control()
    }

    pub fn next_msg_id(&mut self) -> u128 {
        self.counter += 1;
        (u128::from(self.nonce) << 64) | (u128::from(self.id) << 48) | u128::from(self.counter & ((1 << 48) - 1))
    }

    /// Build a message originated by this node with a fresh id.
    pub fn message(&mut self, msg_type: MsgType, round: u32, ttl: u8, payload: Vec<u8>) -> Message {
        let id = self.next_msg_id();
        Message::new(msg_type, self.id, round, id, ttl, payload)
    }

    /// Open a link and send the handshake; the link turns Alive on the peer's first beat.
    pub fn connect(&mut self, peer: NodeId, address: &str) -> Result<(), CommsError> {
        if self.links.get(&peer).is_some_and(PeerLink::is_live) {
            return Err(CommsError::AlreadyConnected(peer));
        }
        self.transport.open(peer, address)?;
        self.links.insert(peer, PeerLink::new(peer, address, Instant::now()));
        let hello = ConnectTo { peer: self.id, address: self.transport.address().to_string() };
        let handshake = self.message(MsgType::ConnectTo, 0, 0, hello.encode());
        self.send_to(peer, &handshake)?;
        let beat = self.message(MsgType::Beat, 0, 0, Vec::new());
        self.send_to(peer, &beat)?;
        Ok(())
    }

    /// Send to one peer; returns the bytes put on the wire.
    pub fn send_to(&mut self, peer: NodeId, msg: &Message) -> Result<usize, CommsError> {
        let frame = encode(msg)?;
        let len = frame.len();
        if msg.sender == self.id {
            self.seen.insert(msg.msg_id);
        }
        self.transport.send(peer, frame)?;
        Ok(len)
    }

    /// Send to every live neighbor; returns how many sends succeeded.
    pub fn broadcast(&mut self, msg: &Message) -> Result<usize, CommsError> {
        let frame = encode(msg)?;
        self.seen.insert(msg.msg_id);
        let mut sent = 0;
        for peer in self.live_neighbors() {
            if self.transport.send(peer, frame.clone()).is_ok() {
                sent += 1;
            }
        }
        Ok(sent)
    }

    /// Wait for the next event until `deadline`. Heartbeats run inside.
    pub fn poll(&mut self, deadline: Instant) -> Option<Event> {
        loop {
            if let Some(event) = self.ready.pop_front() {
                return Some(event);
            }
            // Drain everything already queued so fresh beats count before liveness is judged.
            while let Ok(item) = self.transport.incoming().try_recv() {
                self.handle(item);
            }
            self.tick(Instant::now());
            if !self.ready.is_empty() {
                continue;
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            let wake = self.next_wake().min(deadline);
            match self.transport.incoming().recv_timeout(wake.saturating_duration_since(now)) {
                Ok(item) => self.handle(item),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return None,
            }
        }
    }

    /// Process whatever is queued without blocking.
    pub fn pump(&mut self) -> Vec<Event> {
        let mut events = Vec::new();
        while let Some(event) = self.poll(Instant::now()) {
            events.push(event);
        }
        events
    }

    pub fn shutdown(&mut self) {
        self.transport.shutdown();
        self.links.clear();
    }

    fn next_wake(&self) -> Instant {
        let mut wake = self.next_beat;
        for link in self.links.values() {
            match link.state {
                LinkState::Alive => wake = wake.min(link.last_beat + self.hb.period() * self.hb.suspect_after),
                LinkState::Suspect | LinkState::Connecting => wake = wake.min(link.dead_deadline(&self.hb)),
                LinkState::Dead => {}
            }
        }
        wake
    }

    fn tick(&mut self, now: Instant) {
        for change in update_liveness(self.links.values_mut(), now, &self.hb) {
            if change.to == LinkState::Dead {
                self.transport.close(change.peer);
            }
            self.ready.push_back(Event::Link(change));
        }
        if now >= self.next_beat {
            let targets: Vec<NodeId> = self
                .links
                .values()
                .filter(|l| matches!(l.state, LinkState::Alive | LinkState::Suspect))
                .map(|l| l.peer)
                .collect();
            if !targets.is_empty() {
                let beat = self.message(MsgType::Beat, 0, 0, Vec::new());
                if let Ok(frame) = encode(&beat) {
                    for peer in targets {
                        let _ = self.transport.send(peer, frame.clone());
                    }
                }
            }
            while self.next_beat <= now {
                self.next_beat += self.hb.period();
            }
        }
    }

    fn handle(&mut self, item: Incoming) {
        match item {
            Incoming::Control(signal) => self.ready.push_back(Event::Control(signal)),
            Incoming::Closed { peer } => self.transport.close(peer),
            Incoming::Frame { from, bytes } => match decode(&bytes) {
                Ok(msg) => self.handle_message(msg, from),
                Err(error) => self.ready.push_back(Event::Error { from: Some(from), error }),
            },
        }
    }

    fn handle_message(&mut self, msg: Message, from: NodeId) {
        let now = Instant::now();
        // Any traffic from a direct peer is proof of life.
        if let Some(link) = self.links.get_mut(&from) {
            if let Some(change) = link.beat(now) {
                self.ready.push_back(Event::Link(change));
            }
        }
        match msg.msg_type {
            MsgType::Beat => {}
            MsgType::ConnectTo => self.handle_connect_to(&msg, from),
            _ => {
                let neighbors = self.live_neighbors();
                let decision = on_receive(&msg, from, &mut self.seen, &neighbors);
                if let Some(copy) = &decision.forwarded {
                    if let Ok(frame) = encode(copy) {
                        for &peer in &decision.forward_to {
                            let _ = self.transport.send(peer, frame.clone());
                        }
                    }
                }
                if decision.deliver {
                    self.ready.push_back(Event::Message { msg, from });
                }
            }
        }
    }

    fn handle_connect_to(&mut self, msg: &Message, from: NodeId) {
        let target = match ConnectTo::decode(&msg.payload) {
            Ok(t) => t,
            Err(error) => {
                self.ready.push_back(Event::Error { from: Some(from), error });
                return;
            }
        };
        if target.peer == msg.sender {
            // Handshake from a new neighbor: make sure we can answer, then beat back.
            if !self.transport.is_open(from) {
                if let Err(error) = self.transport.open(from, &target.address) {
                    self.ready.push_back(Event::Error { from: Some(from), error });
                    return;
                }
            }
            let mut link = PeerLink::new(from, target.address, Instant::now());
            let beat = self.message(MsgType::Beat, 0, 0, Vec::new());
            if self.send_to(from, &beat).is_ok() {
                if let Some(change) = link.beat(Instant::now()) {
                    self.ready.push_back(Event::Link(change));
                }
            }
            self.links.insert(from, link);
        } else if target.peer != self.id {
            match self.connect(target.peer, &target.address) {
                Ok(()) | Err(CommsError::AlreadyConnected(_)) => {}
                Err(error) => self.ready.push_back(Event::Error { from: Some(from), error }),
            }
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.transport.shutdown();
    }
}
