//! TCP transport: one stream per neighbor pair, a reader thread per stream and
//! a single writer thread draining the node's outgoing queue.

use std::collections::HashMap;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::codec::read_frame;
use super::{CommCounters, CommsError, Incoming, Transport, FRAME_PREFIX};
use crate::NodeId;

const CONNECT_ATTEMPTS: u32 = 40;
const CONNECT_BACKOFF: Duration = Duration::from_millis(50);
const ACCEPT_POLL: Duration = Duration::from_millis(5);

type Streams = Arc<Mutex<HashMap<NodeId, TcpStream>>>;

struct Outgoing {
    peer: NodeId,
    frame: Vec<u8>,
    queued_at: Instant,
}

pub struct TcpTransport {
    id: NodeId,
    address: String,
    streams: Streams,
    tx: Sender<Incoming>,
    rx: Receiver<Incoming>,
    out_tx: Option<Sender<Outgoing>>,
    counters: Arc<CommCounters>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl TcpTransport {
    pub fn bind(id: NodeId, address: &str) -> Result<Self, CommsError> {
        let listener = TcpListener::bind(address).map_err(|e| match e.kind() {
            std::io::ErrorKind::AddrInUse => CommsError::AddressInUse(address.to_string()),
            _ => CommsError::Io(e.to_string()),
        })?;
        listener.set_nonblocking(true).map_err(|e| CommsError::Io(e.to_string()))?;
        let address = listener.local_addr().map_err(|e| CommsError::Io(e.to_string()))?.to_string();

        let (tx, rx) = unbounded();
        let (out_tx, out_rx) = unbounded::<Outgoing>();
        let streams: Streams = Arc::default();
        let counters = Arc::new(CommCounters::default());
        let stop = Arc::new(AtomicBool::new(false));

        let acceptor = {
            let (streams, tx, counters, stop) = (streams.clone(), tx.clone(), counters.clone(), stop.clone());
            thread::spawn(move || accept_loop(listener, streams, tx, counters, stop))
        };
        let writer = {
            let (streams, counters) = (streams.clone(), counters.clone());
            thread::spawn(move || write_loop(out_rx, streams, counters))
        };
        Ok(Self {
            id,
            address,
            streams,
            tx,
            rx,
            out_tx: Some(out_tx),
            counters,
            stop,
            threads: vec![acceptor, writer],
        })
    }
}

fn accept_loop(listener: TcpListener, streams: Streams, tx: Sender<Incoming>, counters: Arc<CommCounters>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let (streams, tx, counters) = (streams.clone(), tx.clone(), counters.clone());
                thread::spawn(move || read_loop(stream, None, streams, tx, counters));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

/// Reads frames until EOF. Inbound streams learn their peer from the sender
/// field of the first frame (the CONNECT_TO handshake).
fn read_loop(
    mut stream: TcpStream,
    mut peer: Option<NodeId>,
    streams: Streams,
    tx: Sender<Incoming>,
    counters: Arc<CommCounters>,
) {
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(frame) => frame,
            Err(_) => break,
        };
        let from = match peer {
            Some(p) => p,
            None => {
                let sender = NodeId::from_le_bytes([frame[FRAME_PREFIX + 4], frame[FRAME_PREFIX + 5]]);
                if let Ok(clone) = stream.try_clone() {
                    streams.lock().expect("stream table poisoned").entry(sender).or_insert(clone);
                }
                peer = Some(sender);
                sender
            }
        };
        counters.record_received(frame.len());
        if tx.send(Incoming::Frame { from, bytes: frame }).is_err() {
            break;
        }
    }
    if let Some(p) = peer {
        let _ = tx.send(Incoming::Closed { peer: p });
    }
}

fn write_loop(out_rx: Receiver<Outgoing>, streams: Streams, counters: Arc<CommCounters>) {
    for job in out_rx {
        let stream = streams.lock().expect("stream table poisoned").get(&job.peer).and_then(|s| s.try_clone().ok());
        let Some(mut stream) = stream else { continue };
        if stream.write_all(&job.frame).and_then(|_| stream.flush()).is_ok() {
            counters.record_sent(job.frame.len(), job.queued_at.elapsed());
        }
    }
}

impl Transport for TcpTransport {
    fn id(&self) -> NodeId {
        self.id
    }

    fn address(&self) -> &str {
        &self.address
    }

    fn open(&mut self, peer: NodeId, address: &str) -> Result<(), CommsError> {
        if self.is_open(peer) {
            return Ok(());
        }
        let mut last_err = String::new();
        for _ in 0..CONNECT_ATTEMPTS {
            match TcpStream::connect(address) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    let reader = stream.try_clone().map_err(|e| CommsError::Io(e.to_string()))?;
                    self.streams.lock().expect("stream table poisoned").insert(peer, stream);
                    let (streams, tx, counters) = (self.streams.clone(), self.tx.clone(), self.counters.clone());
                    thread::spawn(move || read_loop(reader, Some(peer), streams, tx, counters));
                    return Ok(());
                }
                Err(e) => {
                    last_err = e.to_string();
                    thread::sleep(CONNECT_BACKOFF);
                }
            }
        }
        Err(CommsError::ConnectFailed { address: address.to_string(), reason: last_err })
    }

    fn is_open(&self, peer: NodeId) -> bool {
        self.streams.lock().expect("stream table poisoned").contains_key(&peer)
    }

    fn send(&mut self, peer: NodeId, frame: Vec<u8>) -> Result<(), CommsError> {
        if !self.is_open(peer) {
            return Err(CommsError::NotConnected(peer));
        }
        let out = self.out_tx.as_ref().ok_or(CommsError::PeerGone(peer))?;
        out.send(Outgoing { peer, frame, queued_at: Instant::now() }).map_err(|_| CommsError::PeerGone(peer))
    }

    fn close(&mut self, peer: NodeId) {
        if let Some(stream) = self.streams.lock().expect("stream table poisoned").remove(&peer) {
            let _ = stream.shutdown(Shutdown::Both);
        }
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
        self.stop.store(true, Ordering::Relaxed);
        // Closing the queue lets the writer flush what is pending and exit.
        self.out_tx.take();
        for handle in self.threads.drain(..) {
            let _ = handle.join();
        }
        for (_, stream) in self.streams.lock().expect("stream table poisoned").drain() {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}
