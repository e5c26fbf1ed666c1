//! In-process transport: every node owns a channel registered under its
//! address in a shared [`InprocNetwork`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{CommCounters, CommsError, Incoming, Transport};
use crate::NodeId;

#[derive(Clone)]
struct Mailbox {
    tx: Sender<Incoming>,
    counters: Arc<CommCounters>,
}

#[derive(Clone, Default)]
pub struct InprocNetwork {
    mailboxes: Arc<Mutex<HashMap<String, Mailbox>>>,
}

impl InprocNetwork {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&self, id: NodeId, address: impl Into<String>) -> Result<InprocTransport, CommsError> {
        let address = address.into();
        let (tx, rx) = unbounded();
        let counters = Arc::new(CommCounters::default());
        let mut boxes = self.mailboxes.lock().expect("inproc registry poisoned");
        if boxes.contains_key(&address) {
            return Err(CommsError::AddressInUse(address));
        }
        boxes.insert(address.clone(), Mailbox { tx: tx.clone(), counters: counters.clone() });
        Ok(InprocTransport { id, address, network: self.clone(), tx, rx, counters, peers: HashMap::new() })
    }

    fn lookup(&self, address: &str) -> Option<Mailbox> {
        self.mailboxes.lock().expect("inproc registry poisoned").get(address).cloned()
    }

    fn unbind(&self, address: &str) {
        self.mailboxes.lock().expect("inproc registry poisoned").remove(address);
    }
}

pub struct InprocTransport {
    id: NodeId,
    address: String,
    network: InprocNetwork,
    tx: Sender<Incoming>,
    rx: Receiver<Incoming>,
    counters: Arc<CommCounters>,
    peers: HashMap<NodeId, Mailbox>,
}

impl Transport for InprocTransport {
    fn id(&self) -> NodeId {
        self.id
    }

    fn address(&self) -> &str {
        &self.address
    }

    fn open(&mut self, peer: NodeId, address: &str) -> Result<(), CommsError> {
        let mailbox = self.network.lookup(address).ok_or_else(|| CommsError::ConnectFailed {
            address: address.to_string(),
            reason: "no node bound at this address".into(),
        })?;
        self.peers.insert(peer, mailbox);
        Ok(())
    }

    fn is_open(&self, peer: NodeId) -> bool {
        self.peers.contains_key(&peer)
    }

    fn send(&mut self, peer: NodeId, frame: Vec<u8>) -> Result<(), CommsError> {
        let mailbox = self.peers.get(&peer).ok_or(CommsError::NotConnected(peer))?;
        let len = frame.len();
        mailbox.tx.send(Incoming::Frame { from: self.id, bytes: frame }).map_err(|_| CommsError::PeerGone(peer))?;
        // Both ends are booked at the same instant so totals always balance.
        self.counters.record_sent(len, Duration::ZERO);
        mailbox.counters.record_received(len);
        Ok(())
    }

    fn close(&mut self, peer: NodeId) {
        self.peers.remove(&peer);
    }

    fn incoming(&self) -> &Receiver<Incoming> {
        &self.rx
    }

    fn control(&self) -> Sender<Incoming> {
        self.tx.clone()
    }

    fn counters(&self) -> Arc<CommCounters> {
        self.counters.clone()
    }

    fn shutdown(&mut self) {
        self.network.unbind(&self.address);
        self.peers.clear();
        // Undelivered frames are discarded with the queue.
        while self.rx.try_recv().is_ok() {}
    }
}

impl Drop for InprocTransport {
    fn drop(&mut self) {
        self.network.unbind(&self.address);
    }
}
