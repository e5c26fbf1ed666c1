use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::report::{ScenarioReport, TimelinePoint};
use super::scenario::{PartitionSpec, ScenarioConfig, TransportSpec};
use super::ControllerError;
use crate::comms::inproc::InprocNetwork;
use crate::comms::tcp::TcpTransport;
use crate::comms::{ControlSignal, Incoming, Transport};
use crate::data::{self, Dataset, Partition};
use crate::monitoring::{self, ExportFormat, MetricRecord};
use crate::node::{mix, Architecture, Neighbor, Node, NodeConfig, NodeData, NodeReport, NodeUpdate, Role};
use crate::topology::Topology;
use crate::NodeId;

// Salts separating the seed streams derived from the scenario seed.
const PARTITION_SALT: u32 = 0xD47A;
const SPLIT_SALT: u32 = 0x5B17;

const CONNECT_TIMEOUT_MS: u64 = 10_000;

/// Data shards for every data-holding node, keyed by node id.
pub fn partition_scenario(cfg: &ScenarioConfig, n: usize) -> Result<(Dataset, BTreeMap<NodeId, Vec<usize>>), ControllerError> {
    let dataset = cfg.dataset.generate(cfg.seed)?;
    let holders = cfg.data_nodes(n);
    let seed = mix(cfg.seed, PARTITION_SALT);
    let invalid = |e: data::DataError| ControllerError::InvalidScenario(format!("partition: {e}"));
    let Partition { shards } = match cfg.partition {
        PartitionSpec::Iid => data::partition_iid(dataset.len(), holders.len(), seed).map_err(invalid)?,
        PartitionSpec::Noniid { shards_per_client } => {
            data::partition_noniid(&dataset.labels, holders.len(), shards_per_client, seed).map_err(invalid)?
        }
    };
    Ok((dataset, holders.into_iter().zip(shards).collect()))
}

/// Per-node configuration for a bound set of addresses.
pub fn build_node_configs(
    cfg: &ScenarioConfig,
    topo: &Topology,
    addresses: &[String],
    shards: &BTreeMap<NodeId, Vec<usize>>,
    input_dim: usize,
    log_dir: Option<&Path>,
) -> Result<Vec<NodeConfig>, ControllerError> {
    let n = topo.n();
    let kind = cfg.trainer_kind()?;
    let server = cfg.server();
    let trainers: Vec<NodeId> = cfg.data_nodes(n);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let id = i as NodeId;
        let neighbors: Vec<Neighbor> = topo
            .neighbors(i)
            .map_err(|e| ControllerError::InvalidScenario(e.to_string()))?
            .into_iter()
            .map(|p| Neighbor { id: p, address: addresses[p as usize].clone() })
            .collect();
        let initiate = neighbors.iter().map(|nb| nb.id).filter(|&p| p > id).collect();
        let role = match cfg.architecture {
            Architecture::Dfl => Role::Aggregator,
            Architecture::Sdfl => Role::Trainer,
            Architecture::Cfl if server == Some(id) => Role::Server,
            Architecture::Cfl => Role::Trainer,
        };
        let node = NodeConfig {
            id,
            address: addresses[i].clone(),
            role,
            architecture: cfg.architecture,
            n_nodes: n,
            neighbors,
            initiate,
            trainer: kind,
            input_dim,
            classes: cfg.dataset.classes(),
            training: cfg.training(),
            aggregator: cfg.aggregator,
            round_timeout_ms: cfg.round_timeout_ms(),
            relay_timeout_ms: None,
            heartbeat: cfg.heartbeat,
            monitor_period_ms: (cfg.monitor_period_s * 1000.0).round().max(1.0) as u64,
            model_seed: cfg.seed,
            train_seed: mix(cfg.seed, u32::from(id)),
            ttl: n.min(255) as u8,
            schedule: if cfg.architecture == Architecture::Sdfl { cfg.schedule(n) } else { Vec::new() },
            server,
            upstream: if role == Role::Trainer && cfg.architecture == Architecture::Cfl { server } else { None },
            expected: if role == Role::Server { trainers.clone() } else { Vec::new() },
            shard: shards.get(&id).cloned().unwrap_or_default(),
            kill_at_round: cfg.faults.iter().find(|f| f.node == id).map(|f| f.kill_at_round),
            log_path: log_dir.map(|d| d.join(format!("node{id}.log"))),
            connect_timeout_ms: CONNECT_TIMEOUT_MS,
        };
        // Nodes receive their configuration as a YAML document.
        let node = NodeConfig::from_yaml(&node.to_yaml())
            .map_err(|e| ControllerError::InvalidScenario(format!("node {id}: {e}")))?;
        out.push(node);
    }
    Ok(out)
}

/// A running federation.
pub struct Deployment {
    cfg: ScenarioConfig,
    start: Instant,
    controls: BTreeMap<NodeId, Sender<Incoming>>,
    handles: Vec<JoinHandle<NodeReport>>,
    updates: Receiver<NodeUpdate>,
    out_dir: Option<PathBuf>,
    // Keeps in-process mailboxes registered for the lifetime of the run.
    _network: Option<InprocNetwork>,
}

fn bind_all(cfg: &ScenarioConfig, n: usize) -> Result<(Vec<Box<dyn Transport>>, Option<InprocNetwork>), ControllerError> {
    let mut transports: Vec<Box<dyn Transport>> = Vec::with_capacity(n);
    let fail = |id: usize, e: crate::comms::CommsError| ControllerError::DeployFailed(format!("bind node {id}: {e}"));
    match cfg.transport {
        TransportSpec::Inproc => {
            let net = InprocNetwork::new();
            for i in 0..n {
                transports.push(Box::new(net.bind(i as NodeId, format!("inproc://node{i}")).map_err(|e| fail(i, e))?));
            }
            Ok((transports, Some(net)))
        }
        TransportSpec::Tcp { base_port } => {
            for i in 0..n {
                let port = if base_port == 0 { 0 } else { base_port as usize + i };
                let t = TcpTransport::bind(i as NodeId, &format!("127.0.0.1:{port}")).map_err(|e| fail(i, e))?;
                transports.push(Box::new(t));
            }
            Ok((transports, None))
        }
    }
}

/// Bind every transport, start every node thread and wait until all links are up.
pub fn deploy(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<Deployment, ControllerError> {
    cfg.validate()?;
    let topo = cfg.topology()?;
    let n = topo.n();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| ControllerError::Io(format!("{}: {e}", dir.display())))?;
    }
    let (dataset, shards) = partition_scenario(cfg, n)?;
    let (transports, network) = bind_all(cfg, n)?;
    let addresses: Vec<String> = transports.iter().map(|t| t.address().to_string()).collect();
    let configs = build_node_configs(cfg, &topo, &addresses, &shards, dataset.dim(), out_dir)?;

    let start = Instant::now();
    let (tx, rx) = unbounded();
    let mut dep = Deployment {
        cfg: cfg.clone(),
        start,
        controls: BTreeMap::new(),
        handles: Vec::new(),
        updates: rx,
        out_dir: out_dir.map(Path::to_path_buf),
        _network: network,
    };
    for (node_cfg, transport) in configs.into_iter().zip(transports) {
        let id = node_cfg.id;
        let data = match shards.get(&id) {
            Some(rows) => {
                let shard = dataset.subset(rows);
                let (train, test) = data::split(&shard, cfg.test_fraction, mix(cfg.seed ^ u64::from(SPLIT_SALT), u32::from(id)))
                    .map_err(|e| ControllerError::InvalidScenario(format!("node {id} shard: {e}")))?;
                Some(NodeData { train, test })
            }
            None => None,
        };
        let node = match Node::new(node_cfg, data, transport, start, Some(tx.clone())) {
            Ok(node) => node,
            Err(e) => {
                dep.teardown();
                return Err(ControllerError::DeployFailed(format!("node {id}: {e}")));
            }
        };
        dep.controls.insert(id, node.control());
        let handle = thread::Builder::new()
            .name(format!("node{id}"))
            .spawn(move || node.run())
            .map_err(|e| ControllerError::DeployFailed(format!("spawn node {id}: {e}")));
        match handle {
            Ok(h) => dep.handles.push(h),
            Err(e) => {
                dep.teardown();
                return Err(e);
            }
        }
    }
    drop(tx);

    // Every node reports once its links are settled or its connect window closes.
    let deadline = Instant::now() + Duration::from_millis(CONNECT_TIMEOUT_MS + 5_000);
    let mut ready = BTreeSet::new();
    let mut missing = BTreeSet::new();
    while ready.len() < n {
        match dep.updates.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
            Ok(NodeUpdate::Ready { id, missing: m }) => {
                ready.insert(id);
                missing.extend(m);
            }
            Ok(_) => {}
            Err(_) => break,
        }
    }
    let unready: BTreeSet<NodeId> = (0..n as NodeId).filter(|id| !ready.contains(id)).collect();
    missing.extend(unready);
    if !missing.is_empty() {
        dep.teardown();
        return Err(ControllerError::StartFailed(missing));
    }
    Ok(dep)
}

/// Everything a finished run produced.
#[derive(Debug)]
pub struct ScenarioResult {
    pub report: ScenarioReport,
    pub nodes: Vec<NodeReport>,
    pub records: Vec<MetricRecord>,
}

impl Deployment {
    pub fn start_time(&self) -> Instant {
        self.start
    }

    pub fn control(&self, id: NodeId) -> Option<&Sender<Incoming>> {
        self.controls.get(&id)
    }

    fn signal_all(&self, signal: ControlSignal) {
        for tx in self.controls.values() {
            let _ = tx.send(Incoming::Control(signal.clone()));
        }
    }

    fn teardown(&mut self) {
        self.signal_all(ControlSignal::Stop);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }

    /// Kick off the federation from node 0 and run it to completion.
    pub fn run(self) -> Result<ScenarioResult, ControllerError> {
        let origin = self.controls.get(&0).ok_or_else(|| ControllerError::DeployFailed("no node 0".into()))?;
        origin
            .send(Incoming::Control(ControlSignal::Start))
            .map_err(|_| ControllerError::DeployFailed("node 0 is gone".into()))?;
        self.await_completion()
    }

    /// Wait until every node has finished its rounds or died, bounded by the global timeout.
    pub fn await_completion(mut self) -> Result<ScenarioResult, ControllerError> {
        let n = self.controls.len();
        let rounds = self.cfg.rounds as u32;
        let deadline = self.start + Duration::from_millis(self.cfg.global_timeout_ms());
        let mut done = BTreeSet::new();
        let mut timeline = Vec::new();
        while done.len() < n {
            match self.updates.recv_timeout(deadline.saturating_duration_since(Instant::now())) {
                Ok(NodeUpdate::RoundCompleted { id, round, f1, at_ms }) => {
                    timeline.push(TimelinePoint { node: id, round, f1, at_ms });
                    if round + 1 >= rounds {
                        done.insert(id);
                    }
                }
                Ok(NodeUpdate::Finished(report)) => {
                    done.insert(report.id);
                }
                Ok(NodeUpdate::Ready { .. }) => {}
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        let duration_ms = self.start.elapsed().as_millis() as u64;
        self.signal_all(ControlSignal::Stop);
        let mut nodes = Vec::with_capacity(n);
        for h in self.handles.drain(..) {
            match h.join() {
                Ok(report) => nodes.push(report),
                Err(_) => return Err(ControllerError::DeployFailed("a node thread panicked".into())),
            }
        }
        nodes.sort_by_key(|r| r.id);
        let mut records: Vec<MetricRecord> = nodes.iter().flat_map(|r| r.records.iter().cloned()).collect();
        records.sort_by_key(|r| (r.timestamp_ms, r.node));
        let report = ScenarioReport::build(&self.cfg, &nodes, timeline, duration_ms);
        let result = ScenarioResult { report, nodes, records };
        if let Some(dir) = &self.out_dir {
            write_outputs(dir, &result)?;
        }
        Ok(result)
    }
}

impl Drop for Deployment {
    fn drop(&mut self) {
        self.teardown();
    }
}

fn write_outputs(dir: &Path, result: &ScenarioResult) -> Result<(), ControllerError> {
    let io = |p: &Path, e: String| ControllerError::Io(format!("{}: {e}", p.display()));
    let report_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&result.report).expect("report serializes");
    fs::write(&report_path, json).map_err(|e| io(&report_path, e.to_string()))?;
    for (name, format) in [("metrics.csv", ExportFormat::Csv), ("metrics.json", ExportFormat::Json)] {
        let path = dir.join(name);
        monitoring::export(&result.records, format, &path).map_err(|e| io(&path, e.to_string()))?;
    }
    let summary = dir.join("summary.txt");
    fs::write(&summary, result.report.to_string()).map_err(|e| io(&summary, e.to_string()))?;
    Ok(())
}

/// Deploy, start and collect in one call.
pub fn run_scenario(cfg: &ScenarioConfig, out_dir: Option<&Path>) -> Result<ScenarioResult, ControllerError> {
    deploy(cfg, out_dir)?.run()
}
