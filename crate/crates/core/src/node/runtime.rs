use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use crossbeam_channel::Sender;
use serde::Serialize;

use super::{
    handle_message, sdfl_rotate, Architecture, Effect, FederationPlan, NodeConfig, NodeError, NodeState, Phase,
    ProxyRelay, Role, RoundOutcome,
};
use crate::aggregation::{AggregationError, AggregationInput, Algorithm};
use crate::comms::{
    encode_params, ControlSignal, CounterSnapshot, Endpoint, Event, Incoming, LinkState, Message, ModelsAggregated,
    MsgType, Transport,
};
use crate::data::Dataset;
use crate::learning::{self, AnomalyModel, EvalMetrics, Model, ParamVector, TrainingConfig};
use crate::monitoring::{self, MetricRecord, NodeLogger, NodeSnapshot, Recorder, ResourceProbe};
use crate::NodeId;

/// A node's local shard, already split.
#[derive(Debug, Clone)]
pub struct NodeData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Progress notices sent to whoever supervises the node.
#[derive(Debug)]
pub enum NodeUpdate {
    Ready { id: NodeId, missing: BTreeSet<NodeId> },
    RoundCompleted { id: NodeId, round: u32, f1: Option<f64>, at_ms: u64 },
    Finished(Box<NodeReport>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkEvent {
    pub peer: NodeId,
    pub from: LinkState,
    pub to: LinkState,
    pub at_ms: u64,
}

#[derive(Debug, Clone)]
pub struct NodeReport {
    pub id: NodeId,
    pub role: Role,
    pub architecture: Architecture,
    pub outcomes: Vec<RoundOutcome>,
    pub final_params: ParamVector,
    pub final_metrics: Option<EvalMetrics>,
    /// All configured rounds finished.
    pub completed: bool,
    pub killed_at_ms: Option<u64>,
    pub error: Option<String>,
    pub comms: CounterSnapshot,
    pub records: Vec<MetricRecord>,
    pub link_events: Vec<LinkEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Halt {
    Stop,
    Kill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Wait {
    Done,
    TimedOut,
    Interrupted,
}

/// One participant: protocol state plus its endpoint, model and local data.
pub struct Node {
    cfg: NodeConfig,
    model: Model,
    data: Option<NodeData>,
    state: NodeState,
    ep: Endpoint,
    log: NodeLogger,
    recorder: Recorder,
    probe: ResourceProbe,
    updates: Option<Sender<NodeUpdate>>,
    start: Instant,
    next_sample: Instant,
    outcomes: Vec<RoundOutcome>,
    link_events: Vec<LinkEvent>,
    halt: Option<Halt>,
    aborted: bool,
    killed_at_ms: Option<u64>,
    error: Option<String>,
    sync_count: u64,
    last_eval: Option<EvalMetrics>,
    relay: Option<ProxyRelay>,
    training: TrainingConfig,
    round_timeout: Duration,
}

pub(crate) fn mix(seed: u64, round: u32) -> u64 {
    // splitmix64 finaliser over the seed and round
    let mut z = seed ^ (u64::from(round).wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Node {
    /// `start` is the scenario clock origin shared by every node.
    pub fn new(
        cfg: NodeConfig,
        data: Option<NodeData>,
        transport: Box<dyn Transport>,
        start: Instant,
        updates: Option<Sender<NodeUpdate>>,
    ) -> Result<Self, NodeError> {
        cfg.validate()?;
        let model = Model::new(cfg.trainer, cfg.input_dim, cfg.classes)?;
        let params = model.init_params(cfg.model_seed)?;
        if transport.id() != cfg.id {
            return Err(NodeError::Config(format!("transport bound for {} but config is for {}", transport.id(), cfg.id)));
        }
        let ep = Endpoint::new(transport, cfg.heartbeat, rand::random());
        let log = NodeLogger::open(cfg.id, start, cfg.log_path.as_deref());
        let role = match cfg.architecture {
            Architecture::Sdfl if cfg.schedule.first() == Some(&cfg.id) => Role::Aggregator,
            Architecture::Sdfl => Role::Trainer,
            _ => cfg.role,
        };
        let mut state = NodeState::new(cfg.id, role, cfg.architecture, params, cfg.training.rounds as u32);
        state.current_leader = cfg.schedule.first().copied();
        let relay = (role == Role::Proxy).then(|| ProxyRelay::new(cfg.expected.iter().copied(), cfg.relay_timeout()));
        Ok(Self {
            model,
            data,
            state,
            ep,
            log,
            recorder: Recorder::new(cfg.id, start),
            probe: ResourceProbe::new(),
            updates,
            start,
            next_sample: Instant::now(),
            outcomes: Vec::new(),
            link_events: Vec::new(),
            halt: None,
            aborted: false,
            killed_at_ms: None,
            error: None,
            sync_count: 0,
            last_eval: None,
            relay,
            training: cfg.training,
            round_timeout: cfg.round_timeout(),
            cfg,
        })
    }

    pub fn id(&self) -> NodeId {
        self.cfg.id
    }

    /// Handle for Start/Stop/Kill signals.
    pub fn control(&self) -> Sender<Incoming> {
        self.ep.control()
    }

    pub fn state(&self) -> &NodeState {
        &self.state
    }

    /// Run the node to completion on the calling thread.
    pub fn run(mut self) -> NodeReport {
        self.log.info(format!(
            "starting as {} ({}) at {}, {} neighbors",
            self.state.role,
            self.cfg.architecture,
            self.ep.address(),
            self.cfg.neighbors.len()
        ));
        self.establish_links();
        while self.halt.is_none() {
            if self.state.role == Role::Proxy {
                self.run_proxy();
                break;
            }
            if !self.wait_for_start() {
                break;
            }
            self.run_rounds();
            if self.state.phase == Phase::Done {
                self.linger();
                break;
            }
            self.aborted = false;
        }
        self.finish()
    }

    fn elapsed_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    fn notify(&self, update: NodeUpdate) {
        if let Some(tx) = &self.updates {
            let _ = tx.send(update);
        }
    }

    fn set_phase(&mut self, next: Phase) {
        let prev = self.state.phase;
        if prev == next {
            return;
        }
        if !prev.can_move_to(next) {
            self.log.error(format!("illegal phase move {prev:?} -> {next:?}"));
        }
        self.log.info(format!("phase {prev:?} -> {next:?} (round {})", self.state.round));
        self.state.phase = next;
    }

    fn establish_links(&mut self) {
        for peer in self.cfg.initiate.clone() {
            let Some(addr) = self.cfg.neighbor_address(peer).map(str::to_string) else { continue };
            match self.ep.connect(peer, &addr) {
                Ok(()) => self.log.debug(format!("dialed {peer} at {addr}")),
                Err(e) => self.log.error(format!("connect to {peer} failed: {e}")),
            }
        }
        let wanted: BTreeSet<NodeId> = self.cfg.neighbors.iter().map(|n| n.id).collect();
        let deadline = Instant::now() + Duration::from_millis(self.cfg.connect_timeout_ms);
        let target = wanted.clone();
        self.wait_for(deadline, move |n| target.iter().all(|&p| n.ep.link_state(p) == Some(LinkState::Alive)));
        let missing: BTreeSet<NodeId> =
            wanted.into_iter().filter(|&p| self.ep.link_state(p) != Some(LinkState::Alive)).collect();
        if missing.is_empty() {
            self.log.info("all links alive");
        } else {
            self.log.warn(format!("links not established: {missing:?}"));
        }
        self.notify(NodeUpdate::Ready { id: self.cfg.id, missing });
    }

    fn wait_for_start(&mut self) -> bool {
        let far = Instant::now() + Duration::from_secs(365 * 24 * 3600);
        self.wait_for(far, |n| n.state.phase == Phase::Training) == Wait::Done
    }

    /// Pump events until `done` holds, the deadline passes or the node is halted/aborted.
    fn wait_for(&mut self, deadline: Instant, mut done: impl FnMut(&Node) -> bool) -> Wait {
        loop {
            if self.halt.is_some() || self.aborted {
                return Wait::Interrupted;
            }
            if done(self) {
                return Wait::Done;
            }
            let now = Instant::now();
            if now >= deadline {
                return Wait::TimedOut;
            }
            self.maybe_sample(now);
            let mut until = deadline.min(self.next_sample);
            if let Some(d) = self.relay.as_ref().and_then(ProxyRelay::next_deadline) {
                until = until.min(d);
            }
            if let Some(event) = self.ep.poll(until) {
                self.dispatch(event);
            }
            self.expire_relay();
        }
    }

    fn maybe_sample(&mut self, now: Instant) {
        if now < self.next_sample {
            return;
        }
        let snap = self.snapshot();
        let ts = self.elapsed_ms();
        let records = monitoring::sample(self.cfg.id, &snap, &mut self.probe, now, ts);
        self.recorder.extend(records);
        let period = Duration::from_millis(self.cfg.monitor_period_ms.max(1));
        while self.next_sample <= now {
            self.next_sample += period;
        }
    }

    fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            round: self.state.round,
            model_size_bytes: 4 * self.state.params.len(),
            sync_count: self.sync_count,
            active_connections: self.ep.alive_neighbors().len(),
            comms: self.ep.counters().snapshot(),
            eval: self.last_eval.clone(),
        }
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::Message { msg, from } => self.on_message(msg, from),
            Event::Link(change) => {
                let at_ms = self.elapsed_ms();
                self.link_events.push(super::LinkEvent { peer: change.peer, from: change.from, to: change.to, at_ms });
                let text = format!("link {} {:?} -> {:?}", change.peer, change.from, change.to);
                if change.to == LinkState::Alive {
                    self.log.info(text);
                } else {
                    self.log.warn(text);
                }
            }
            Event::Control(ControlSignal::Start) => self.initiate(),
            Event::Control(ControlSignal::Stop) => {
                self.log.info("stop requested");
                self.halt = Some(Halt::Stop);
            }
            Event::Control(ControlSignal::Kill) => self.kill(),
            Event::Error { from, error } => self.log.warn(format!("comms error from {from:?}: {error}")),
        }
    }

    fn on_message(&mut self, msg: Message, from: NodeId) {
        self.log.debug(format!(
            "recv {} from {from} (origin {}, round {}, {} bytes)",
            msg.msg_type,
            msg.sender,
            msg.round,
            msg.frame_len()
        ));
        if self.state.role == Role::Proxy && msg.msg_type == MsgType::Params {
            self.relay_params(msg, from);
            return;
        }
        let prev = self.state.phase;
        match handle_message(&mut self.state, &msg) {
            Effect::Start(plan) => self.begin(plan),
            Effect::StartRejected { phase } => {
                self.log.warn(format!("START_LEARNING from {} rejected in phase {phase:?}", msg.sender))
            }
            Effect::Abort => {
                self.log.info(format!("learning aborted by {}", msg.sender));
                self.log.info(format!("phase {prev:?} -> Idle (round {})", self.state.round));
                self.aborted = true;
            }
            Effect::Shutdown => {
                self.log.info(format!("STOP from {}", msg.sender));
                self.halt = Some(Halt::Stop);
            }
            Effect::Stale { sender, round } => self.log.warn(format!(
                "dropped stale PARAMS from {sender} for round {round} (now {})",
                self.state.round
            )),
            Effect::Rejected { sender, reason } => self.log.warn(format!("rejected message from {sender}: {reason}")),
            Effect::LeaderChanged { leader } => self.log.info(format!("leader is now {leader}")),
            Effect::RoleChanged(role) => self.log.info(format!("role set to {role}")),
            _ => {}
        }
    }

    fn initiate(&mut self) {
        if self.state.phase != Phase::Idle {
            self.log.warn("start signal ignored: federation already running");
            return;
        }
        let plan = FederationPlan { training: self.cfg.training, round_timeout_ms: self.cfg.round_timeout_ms };
        self.log.info("initiating federation");
        self.flood(MsgType::StartLearning, 0, plan.encode());
        self.begin(plan);
    }

    fn begin(&mut self, plan: FederationPlan) {
        if self.state.role == Role::Proxy {
            return;
        }
        self.training = plan.training;
        self.round_timeout = Duration::from_millis(plan.round_timeout_ms);
        self.state.rounds_total = plan.training.rounds as u32;
        self.set_phase(Phase::Training);
    }

    fn kill(&mut self) {
        if self.halt == Some(Halt::Kill) {
            return;
        }
        self.killed_at_ms = Some(self.elapsed_ms());
        self.log.error(format!("killed in round {}", self.state.round));
        self.halt = Some(Halt::Kill);
        // Vanish without a word: peers find out through missed beats.
        self.ep.shutdown();
    }

    fn kill_due(&mut self, round: u32) -> bool {
        if self.cfg.kill_at_round == Some(round) {
            self.kill();
            return true;
        }
        false
    }

    fn flood(&mut self, msg_type: MsgType, round: u32, payload: Vec<u8>) {
        let msg = self.ep.message(msg_type, round, self.cfg.ttl, payload);
        match self.ep.broadcast(&msg) {
            Ok(k) => self.log.debug(format!("send {msg_type} round {round} to {k} neighbors")),
            Err(e) => self.log.error(format!("send {msg_type} failed: {e}")),
        }
    }

    fn send_direct(&mut self, peer: NodeId, msg_type: MsgType, round: u32, payload: Vec<u8>) {
        let msg = self.ep.message(msg_type, round, 0, payload);
        self.forward_to(peer, &msg);
    }

    fn forward_to(&mut self, peer: NodeId, msg: &Message) {
        match self.ep.send_to(peer, msg) {
            Ok(bytes) => {
                self.log.debug(format!("send {} round {} to {peer} ({bytes} bytes)", msg.msg_type, msg.round))
            }
            Err(e) => self.log.warn(format!("send {} to {peer} failed: {e}", msg.msg_type)),
        }
    }

    fn dead_peers(&self) -> BTreeSet<NodeId> {
        self.ep.links().filter(|l| l.state == LinkState::Dead).map(|l| l.peer).collect()
    }

    fn train_step(&mut self, round: u32) -> Result<ParamVector, NodeError> {
        let data = self.data.as_ref().ok_or_else(|| NodeError::Config("node holds no training data".into()))?;
        let seed = mix(self.cfg.train_seed, round);
        Ok(learning::train_local(&self.model, &self.state.params, &data.train, &self.training, seed)?)
    }

    fn evaluate(&mut self, params: &ParamVector) -> Option<EvalMetrics> {
        let data = self.data.as_ref()?;
        if data.test.is_empty() {
            return None;
        }
        let result = if self.model.kind().is_anomaly_detector() {
            AnomalyModel::new(self.model.clone(), params.clone()).fit_on(&data.train).and_then(|m| m.evaluate(&data.test))
        } else {
            learning::evaluate(&self.model, params, &data.test)
        };
        match result {
            Ok(m) => Some(m),
            Err(e) => {
                self.log.warn(format!("evaluation failed: {e}"));
                None
            }
        }
    }

    fn aggregate(
        &mut self,
        own: Option<&ParamVector>,
        received: Vec<(NodeId, &ParamVector)>,
    ) -> Result<ParamVector, NodeError> {
        let input = AggregationInput { own, received, algorithm: self.cfg.aggregator };
        match input.aggregate() {
            Ok(p) => Ok(p),
            Err(AggregationError::TooFewVectors { algorithm, needed, actual }) => {
                self.log.warn(format!("{algorithm} needs {needed} vectors, got {actual}; falling back to fedavg"));
                let fallback = AggregationInput { algorithm: Algorithm::FedAvg, ..input };
                fallback.aggregate().map_err(|e| NodeError::Config(e.to_string()))
            }
            Err(e) => Err(NodeError::Config(e.to_string())),
        }
    }

    fn run_rounds(&mut self) {
        while self.state.round < self.state.rounds_total {
            let result = match (self.cfg.architecture, self.state.role) {
                (Architecture::Dfl, _) => self.dfl_round(),
                (Architecture::Sdfl, _) => self.sdfl_round(),
                (Architecture::Cfl, Role::Server) => self.cfl_server_round(),
                (Architecture::Cfl, _) => self.cfl_trainer_round(),
            };
            match result {
                Ok(Some(outcome)) => self.complete_round(outcome),
                Ok(None) => return,
                Err(e) => {
                    self.log.error(format!("round {} failed: {e}", self.state.round));
                    self.error = Some(e.to_string());
                    self.halt = Some(Halt::Stop);
                    return;
                }
            }
        }
    }

    fn complete_round(&mut self, mut outcome: RoundOutcome) {
        self.state.params = outcome.aggregated.clone();
        let metrics = self.evaluate(&outcome.aggregated.clone());
        if outcome.contributors.len() > 1 {
            self.sync_count += 1;
        }
        if let Some(m) = &metrics {
            for (name, value) in [
                ("loss", m.loss),
                ("accuracy", m.accuracy),
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
            ] {
                let _ = self.recorder.record(name, value);
            }
        }
        let _ = self.recorder.record("round", f64::from(outcome.round));
        let _ = self.recorder.record("sync_count", self.sync_count as f64);
        self.log.info(format!(
            "round {} done: contributors {:?}, timed_out {}, f1 {}",
            outcome.round,
            outcome.contributors,
            outcome.timed_out,
            metrics.as_ref().map_or("n/a".to_string(), |m| format!("{:.4}", m.f1))
        ));
        self.notify(NodeUpdate::RoundCompleted {
            id: self.cfg.id,
            round: outcome.round,
            f1: metrics.as_ref().map(|m| m.f1),
            at_ms: self.elapsed_ms(),
        });
        self.last_eval = metrics.clone();
        outcome.metrics = metrics;
        self.outcomes.push(outcome);
        self.state.advance_round();
        let next = if self.state.round >= self.state.rounds_total { Phase::Done } else { Phase::Training };
        self.set_phase(next);
    }

    fn dfl_round(&mut self) -> Result<Option<RoundOutcome>, NodeError> {
        let r = self.state.round;
        let t0 = Instant::now();
        let deadline = t0 + self.round_timeout;
        let local = self.train_step(r)?;
        if self.kill_due(r) {
            return Ok(None);
        }
        self.state.params = local.clone();
        self.flood(MsgType::ModelsReady, r, Vec::new());
        self.set_phase(Phase::WaitingParams);
        self.state.absorb_early();

        let expected = self.ep.live_neighbors();
        let payload = encode_params(local.values());
        for &peer in &expected {
            self.send_direct(peer, MsgType::Params, r, payload.clone());
        }
        let exp = expected.clone();
        let wait = self.wait_for(deadline, move |n| {
            let live = n.ep.live_neighbors();
            exp.iter().filter(|p| live.contains(p)).all(|p| n.state.pending.contains_key(p))
        });
        if wait == Wait::Interrupted {
            return Ok(None);
        }
        let elapsed = t0.elapsed();
        self.set_phase(Phase::Aggregating);
        if expected.is_empty() {
            self.log.warn(format!("round {r}: no live neighbors, aggregating alone"));
        }
        let timed_out = !expected.iter().all(|p| self.state.pending.contains_key(p));
        let pending = std::mem::take(&mut self.state.pending);
        let received: Vec<(NodeId, &ParamVector)> = pending.iter().map(|(&id, p)| (id, p)).collect();
        let mut contributors: BTreeSet<NodeId> = pending.keys().copied().collect();
        contributors.insert(self.cfg.id);
        let aggregated = self.aggregate(Some(&local), received)?;
        self.state.params = aggregated.clone();
        let info = ModelsAggregated { next_leader: None, contributors: contributors.iter().copied().collect() };
        self.flood(MsgType::ModelsAggregated, r, info.encode());
        Ok(Some(RoundOutcome {
            round: r,
            aggregated,
            local: Some(local),
            contributors,
            elapsed,
            timed_out,
            aggregator: Some(self.cfg.id),
            aborted: false,
            metrics: None,
        }))
    }

    fn sdfl_round(&mut self) -> Result<Option<RoundOutcome>, NodeError> {
        let r = self.state.round;
        let t0 = Instant::now();
        let deadline = t0 + self.round_timeout;
        let leader = self.state.current_leader.unwrap_or(self.cfg.schedule[0]);
        let is_leader = leader == self.cfg.id;
        self.state.role = if is_leader { Role::Aggregator } else { Role::Trainer };
        let local = self.train_step(r)?;
        if self.kill_due(r) {
            return Ok(None);
        }
        self.state.params = local.clone();
        self.flood(MsgType::ModelsReady, r, Vec::new());
        self.set_phase(Phase::WaitingParams);
        self.state.absorb_early();

        if is_leader {
            let dead_at_start = self.dead_peers();
            let expected: BTreeSet<NodeId> = self
                .cfg
                .schedule
                .iter()
                .copied()
                .filter(|&x| x != self.cfg.id && !dead_at_start.contains(&x))
                .collect();
            let exp = expected.clone();
            let wait = self.wait_for(deadline, move |n| {
                let dead = n.dead_peers();
                exp.iter().filter(|p| !dead.contains(p)).all(|p| n.state.pending.contains_key(p))
            });
            if wait == Wait::Interrupted {
                return Ok(None);
            }
            let elapsed = t0.elapsed();
            self.set_phase(Phase::Aggregating);
            let timed_out = !expected.iter().all(|p| self.state.pending.contains_key(p));
            let pending = std::mem::take(&mut self.state.pending);
            let received: Vec<(NodeId, &ParamVector)> =
                pending.iter().filter(|(id, _)| expected.contains(id)).map(|(&id, p)| (id, p)).collect();
            let mut contributors: BTreeSet<NodeId> = received.iter().map(|(id, _)| *id).collect();
            contributors.insert(self.cfg.id);
            let aggregated = self.aggregate(Some(&local), received)?;
            self.state.params = aggregated.clone();
            let next = sdfl_rotate(&self.cfg.schedule, self.cfg.id, &self.dead_peers());
            self.flood(MsgType::Params, r, encode_params(aggregated.values()));
            if next != self.cfg.id && self.ep.live_neighbors().contains(&next) {
                self.send_direct(next, MsgType::Leadership, r + 1, next.to_le_bytes().to_vec());
            }
            let info = ModelsAggregated { next_leader: Some(next), contributors: contributors.iter().copied().collect() };
            self.flood(MsgType::ModelsAggregated, r, info.encode());
            self.state.current_leader = Some(next);
            self.log.info(format!("round {r}: passing leadership to {next}"));
            Ok(Some(RoundOutcome {
                round: r,
                aggregated,
                local: Some(local),
                contributors,
                elapsed,
                timed_out,
                aggregator: Some(self.cfg.id),
                aborted: false,
                metrics: None,
            }))
        } else {
            self.flood(MsgType::Params, r, encode_params(local.values()));
            let wait = self.wait_for(deadline, move |n| {
                (n.state.pending.contains_key(&leader) && n.state.aggregated.contains_key(&r))
                    || n.ep.link_state(leader) == Some(LinkState::Dead)
            });
            if wait == Wait::Interrupted {
                return Ok(None);
            }
            let elapsed = t0.elapsed();
            self.set_phase(Phase::Aggregating);
            let installed = self.state.pending.get(&leader).cloned();
            let announced = self.state.aggregated.get(&r).map(|(_, info)| info.clone());
            let (aggregated, contributors, timed_out) = match installed {
                Some(agg) => {
                    let contributors = announced.map(|a| a.contributors.into_iter().collect()).unwrap_or_default();
                    (agg, contributors, false)
                }
                None => {
                    let mut dead = self.dead_peers();
                    dead.insert(leader);
                    let next = sdfl_rotate(&self.cfg.schedule, leader, &dead);
                    self.log.warn(format!("round {r}: no aggregate from leader {leader}; next leader {next}"));
                    self.state.current_leader = Some(next);
                    (local.clone(), BTreeSet::from([self.cfg.id]), true)
                }
            };
            self.state.pending.clear();
            Ok(Some(RoundOutcome {
                round: r,
                aggregated,
                local: Some(local),
                contributors,
                elapsed,
                timed_out,
                aggregator: Some(leader),
                aborted: false,
                metrics: None,
            }))
        }
    }

    fn cfl_server_round(&mut self) -> Result<Option<RoundOutcome>, NodeError> {
        let r = self.state.round;
        let t0 = Instant::now();
        let deadline = t0 + self.round_timeout;
        self.set_phase(Phase::WaitingParams);
        self.state.absorb_early();
        let dead_at_start = self.dead_peers();
        let expected: BTreeSet<NodeId> =
            self.cfg.expected.iter().copied().filter(|p| !dead_at_start.contains(p)).collect();
        let exp = expected.clone();
        let wait = self.wait_for(deadline, move |n| {
            let dead = n.dead_peers();
            exp.iter().filter(|p| !dead.contains(p)).all(|p| n.state.pending.contains_key(p))
        });
        if wait == Wait::Interrupted {
            return Ok(None);
        }
        let elapsed = t0.elapsed();
        self.set_phase(Phase::Aggregating);
        let timed_out = !expected.iter().all(|p| self.state.pending.contains_key(p));
        let pending = std::mem::take(&mut self.state.pending);
        let received: Vec<(NodeId, &ParamVector)> =
            pending.iter().filter(|(id, _)| self.cfg.expected.contains(id)).map(|(&id, p)| (id, p)).collect();
        let contributors: BTreeSet<NodeId> = received.iter().map(|(id, _)| *id).collect();
        if received.is_empty() {
            self.log.error(format!("round {r} aborted: no trainer parameters arrived"));
            return Ok(Some(RoundOutcome {
                round: r,
                aggregated: self.state.params.clone(),
                local: None,
                contributors,
                elapsed,
                timed_out: true,
                aggregator: Some(self.cfg.id),
                aborted: true,
                metrics: None,
            }));
        }
        let aggregated = self.aggregate(None, received)?;
        self.state.params = aggregated.clone();
        let payload = encode_params(aggregated.values());
        for peer in self.ep.live_neighbors() {
            self.send_direct(peer, MsgType::Params, r, payload.clone());
        }
        let info = ModelsAggregated { next_leader: None, contributors: contributors.iter().copied().collect() };
        self.flood(MsgType::ModelsAggregated, r, info.encode());
        Ok(Some(RoundOutcome {
            round: r,
            aggregated,
            local: None,
            contributors,
            elapsed,
            timed_out,
            aggregator: Some(self.cfg.id),
            aborted: false,
            metrics: None,
        }))
    }

    fn cfl_trainer_round(&mut self) -> Result<Option<RoundOutcome>, NodeError> {
        let r = self.state.round;
        let t0 = Instant::now();
        let deadline = t0 + self.round_timeout;
        let server = self.cfg.server.expect("validated");
        let upstream = self.cfg.upstream.expect("validated");
        let local = self.train_step(r)?;
        if self.kill_due(r) {
            return Ok(None);
        }
        self.state.params = local.clone();
        self.flood(MsgType::ModelsReady, r, Vec::new());
        self.set_phase(Phase::WaitingParams);
        self.state.absorb_early();
        self.send_direct(upstream, MsgType::Params, r, encode_params(local.values()));
        let wait = self.wait_for(deadline, move |n| {
            (n.state.pending.contains_key(&server) && n.state.aggregated.contains_key(&r))
                || n.ep.link_state(upstream) == Some(LinkState::Dead)
        });
        if wait == Wait::Interrupted {
            return Ok(None);
        }
        let elapsed = t0.elapsed();
        self.set_phase(Phase::Aggregating);
        let installed = self.state.pending.get(&server).cloned();
        let announced = self.state.aggregated.get(&r).map(|(_, info)| info.clone());
        self.state.pending.clear();
        let (aggregated, contributors, timed_out) = match installed {
            Some(agg) => (agg, announced.map(|a| a.contributors.into_iter().collect()).unwrap_or_default(), false),
            None => {
                self.log.warn(format!("round {r}: no aggregate from server {server}; keeping local model"));
                (local.clone(), BTreeSet::from([self.cfg.id]), true)
            }
        };
        Ok(Some(RoundOutcome {
            round: r,
            aggregated,
            local: Some(local),
            contributors,
            elapsed,
            timed_out,
            aggregator: Some(server),
            aborted: false,
            metrics: None,
        }))
    }

    fn relay_params(&mut self, msg: Message, from: NodeId) {
        let upstream = self.cfg.upstream.expect("validated");
        let from_upstream = from == upstream || Some(msg.sender) == self.cfg.server;
        if from_upstream {
            let live = self.ep.live_neighbors();
            for peer in self.cfg.expected.clone() {
                if live.contains(&peer) {
                    self.forward_to(peer, &msg);
                }
            }
            return;
        }
        let out = match self.relay.as_mut() {
            Some(relay) => relay.offer(msg, Instant::now()),
            None => vec![msg],
        };
        for m in out {
            self.forward_to(upstream, &m);
        }
    }

    fn expire_relay(&mut self) {
        let Some(upstream) = self.cfg.upstream else { return };
        let out = match self.relay.as_mut() {
            Some(relay) => relay.expire(Instant::now()),
            None => return,
        };
        if !out.is_empty() {
            self.log.info(format!("relay window closed with {} of {} trainers", out.len(), self.cfg.expected.len()));
        }
        for m in out {
            self.forward_to(upstream, &m);
        }
    }

    fn run_proxy(&mut self) {
        let far = Instant::now() + Duration::from_secs(365 * 24 * 3600);
        self.wait_for(far, |_| false);
    }

    fn linger(&mut self) {
        self.log.info("all rounds complete; serving peers until stopped");
        let far = Instant::now() + Duration::from_secs(365 * 24 * 3600);
        self.wait_for(far, |_| false);
    }

    fn finish(mut self) -> NodeReport {
        if self.halt != Some(Halt::Kill) {
            let now = Instant::now();
            self.next_sample = now;
            self.maybe_sample(now);
            self.ep.shutdown();
        }
        let completed = self.killed_at_ms.is_none()
            && self.error.is_none()
            && (self.state.role == Role::Proxy || self.outcomes.len() as u32 >= self.state.rounds_total);
        self.log.info(format!("finished: completed={completed}, rounds={}", self.outcomes.len()));
        let report = NodeReport {
            id: self.cfg.id,
            role: self.state.role,
            architecture: self.cfg.architecture,
            final_params: self.state.params.clone(),
            final_metrics: self.outcomes.last().and_then(|o| o.metrics.clone()),
            outcomes: std::mem::take(&mut self.outcomes),
            completed,
            killed_at_ms: self.killed_at_ms,
            error: self.error.take(),
            comms: self.ep.counters().snapshot(),
            records: std::mem::replace(&mut self.recorder, Recorder::new(self.cfg.id, self.start)).into_records(),
            link_events: std::mem::take(&mut self.link_events),
        };
        self.notify(NodeUpdate::Finished(Box::new(report.clone())));
        report
    }
}
