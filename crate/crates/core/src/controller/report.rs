use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::scenario::ScenarioConfig;
use crate::learning::EvalMetrics;
use crate::monitoring::MetricRecord;
use crate::node::{Architecture, NodeReport, Role};
use crate::NodeId;

/// F1 of one node after one round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelinePoint {
    pub node: NodeId,
    pub round: u32,
    pub f1: Option<f64>,
    pub at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub id: NodeId,
    pub role: Role,
    pub holds_data: bool,
    pub completed: bool,
    pub rounds_completed: usize,
    pub killed_at_ms: Option<u64>,
    pub error: Option<String>,
    pub final_metrics: Option<EvalMetrics>,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
    pub mean_send_latency_ms: f64,
    pub timed_out_rounds: Vec<u32>,
    /// Who aggregated each round, as seen by this node.
    pub aggregators: Vec<Option<NodeId>>,
    pub contributors: Vec<Vec<NodeId>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub architecture: Architecture,
    pub n_nodes: usize,
    pub rounds: usize,
    pub seed: u64,
    pub duration_ms: u64,
    pub total_bytes_sent: u64,
    pub total_bytes_received: u64,
    /// Mean final F1 over surviving data-holding nodes.
    pub mean_final_f1: Option<f64>,
    pub f1_target: f64,
    /// First moment every surviving data-holding node had reached the target.
    pub time_to_threshold_ms: Option<u64>,
    pub rounds_to_threshold: Option<u32>,
    pub incomplete_nodes: Vec<NodeId>,
    pub nodes: Vec<NodeSummary>,
    pub f1_timeline: Vec<TimelinePoint>,
}

impl ScenarioReport {
    pub fn build(cfg: &ScenarioConfig, nodes: &[NodeReport], mut timeline: Vec<TimelinePoint>, duration_ms: u64) -> Self {
        let holders: BTreeSet<NodeId> = cfg.data_nodes(nodes.len()).into_iter().collect();
        timeline.sort_by_key(|p| (p.round, p.node));
        let summaries: Vec<NodeSummary> = nodes
            .iter()
            .map(|r| NodeSummary {
                id: r.id,
                role: r.role,
                holds_data: holders.contains(&r.id),
                completed: r.completed,
                rounds_completed: r.outcomes.len(),
                killed_at_ms: r.killed_at_ms,
                error: r.error.clone(),
                final_metrics: r.final_metrics,
                bytes_sent: r.comms.bytes_sent,
                bytes_received: r.comms.bytes_received,
                msgs_sent: r.comms.frames_sent,
                msgs_received: r.comms.frames_received,
                mean_send_latency_ms: r.comms.mean_send_latency_ms,
                timed_out_rounds: r.outcomes.iter().filter(|o| o.timed_out).map(|o| o.round).collect(),
                aggregators: r.outcomes.iter().map(|o| o.aggregator).collect(),
                contributors: r.outcomes.iter().map(|o| o.contributors.iter().copied().collect()).collect(),
            })
            .collect();

        let survivors: BTreeSet<NodeId> =
            nodes.iter().filter(|r| r.killed_at_ms.is_none() && holders.contains(&r.id)).map(|r| r.id).collect();
        let finals: Vec<f64> = summaries
            .iter()
            .filter(|s| survivors.contains(&s.id))
            .filter_map(|s| s.final_metrics.map(|m| m.f1))
            .collect();
        let mean_final_f1 = (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64);
        let (time_to_threshold_ms, rounds_to_threshold) = threshold(&timeline, &survivors, cfg.f1_target);

        Self {
            name: cfg.name.clone(),
            architecture: cfg.architecture,
            n_nodes: nodes.len(),
            rounds: cfg.rounds,
            seed: cfg.seed,
            duration_ms,
            total_bytes_sent: nodes.iter().map(|r| r.comms.bytes_sent).sum(),
            total_bytes_received: nodes.iter().map(|r| r.comms.bytes_received).sum(),
            mean_final_f1,
            f1_target: cfg.f1_target,
            time_to_threshold_ms,
            rounds_to_threshold,
            incomplete_nodes: nodes.iter().filter(|r| !r.completed).map(|r| r.id).collect(),
            nodes: summaries,
            f1_timeline: timeline,
        }
    }
}

/// Earliest round at which every node in `group` reports F1 ≥ target; the time
/// is when the slowest of them finished that round.
fn threshold(timeline: &[TimelinePoint], group: &BTreeSet<NodeId>, target: f64) -> (Option<u64>, Option<u32>) {
    if group.is_empty() {
        return (None, None);
    }
    let mut by_round: BTreeMap<u32, Vec<&TimelinePoint>> = BTreeMap::new();
    for p in timeline.iter().filter(|p| group.contains(&p.node)) {
        by_round.entry(p.round).or_default().push(p);
    }
    for (round, points) in by_round {
        let reached: BTreeSet<NodeId> =
            points.iter().filter(|p| p.f1.is_some_and(|f| f >= target)).map(|p| p.node).collect();
        if reached == *group {
            let at = points.iter().map(|p| p.at_ms).max().unwrap_or(0);
            return (Some(at), Some(round + 1));
        }
    }
    (None, None)
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} ({}, {} nodes, {} rounds, seed {})", self.name, self.architecture, self.n_nodes, self.rounds, self.seed)?;
        writeln!(f, "duration: {} ms", self.duration_ms)?;
        writeln!(f, "traffic: {} bytes sent, {} bytes received", self.total_bytes_sent, self.total_bytes_received)?;
        writeln!(f, "mean final f1: {}", opt(self.mean_final_f1.map(|x| format!("{x:.4}"))))?;
        writeln!(
            f,
            "f1 >= {}: {} ms, {} rounds",
            self.f1_target,
            opt(self.time_to_threshold_ms),
            opt(self.rounds_to_threshold)
        )?;
        if !self.incomplete_nodes.is_empty() {
            writeln!(f, "incomplete nodes: {:?}", self.incomplete_nodes)?;
        }
        writeln!(f, "{:>4} {:>10} {:>6} {:>8} {:>12} {:>12} {:>8}", "node", "role", "rounds", "f1", "sent", "received", "killed")?;
        for s in &self.nodes {
            writeln!(
                f,
                "{:>4} {:>10} {:>6} {:>8} {:>12} {:>12} {:>8}",
                s.id,
                s.role.to_string(),
                s.rounds_completed,
                opt(s.final_metrics.map(|m| format!("{:.4}", m.f1))),
                s.bytes_sent,
                s.bytes_received,
                opt(s.killed_at_ms),
            )?;
        }
        Ok(())
    }
}

/// Digest of an exported metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordSummary {
    pub nodes: Vec<NodeId>,
    pub final_f1: BTreeMap<NodeId, f64>,
    pub bytes_sent: BTreeMap<NodeId, f64>,
    pub bytes_received: BTreeMap<NodeId, f64>,
    pub target: f64,
    /// Time by which every node that ever reported F1 had reached the target.
    pub time_to_threshold_ms: Option<u64>,
}

pub fn summarize_records(records: &[MetricRecord], target: f64) -> RecordSummary {
    let nodes: BTreeSet<NodeId> = records.iter().map(|r| r.node).collect();
    let latest = |name: &str| -> BTreeMap<NodeId, f64> {
        let mut out = BTreeMap::new();
        let mut ts: BTreeMap<NodeId, u64> = BTreeMap::new();
        for r in records.iter().filter(|r| r.name == name) {
            if ts.get(&r.node).is_none_or(|&t| r.timestamp_ms >= t) {
                ts.insert(r.node, r.timestamp_ms);
                out.insert(r.node, r.value);
            }
        }
        out
    };
    let final_f1 = latest("f1");
    let mut first_hit: BTreeMap<NodeId, u64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.name == "f1" && r.value >= target) {
        let e = first_hit.entry(r.node).or_insert(r.timestamp_ms);
        *e = (*e).min(r.timestamp_ms);
    }
    let time_to_threshold_ms = (!final_f1.is_empty() && final_f1.keys().all(|n| first_hit.contains_key(n)))
        .then(|| first_hit.values().copied().max().unwrap_or(0));
    RecordSummary {
        nodes: nodes.into_iter().collect(),
        final_f1,
        bytes_sent: latest("bytes_sent"),
        bytes_received: latest("bytes_received"),
        target,
        time_to_threshold_ms,
    }
}

impl fmt::Display for RecordSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} nodes", self.nodes.len())?;
        writeln!(f, "{:>4} {:>8} {:>12} {:>12}", "node", "f1", "sent", "received")?;
        for n in &self.nodes {
            writeln!(
                f,
                "{:>4} {:>8} {:>12} {:>12}",
                n,
                opt(self.final_f1.get(n).map(|x| format!("{x:.4}"))),
                opt(self.bytes_sent.get(n)),
                opt(self.bytes_received.get(n)),
            )?;
        }
        writeln!(f, "time to f1 >= {}: {} ms", self.target, opt(self.time_to_threshold_ms))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(node: NodeId, round: u32, f1: f64, at_ms: u64) -> TimelinePoint {
        TimelinePoint { node, round, f1: Some(f1), at_ms }
    }

    #[test]
    fn threshold_needs_every_member() {
        let group = BTreeSet::from([0, 1]);
        let tl = vec![pt(0, 0, 0.95, 10), pt(1, 0, 0.5, 12), pt(0, 1, 0.96, 20), pt(1, 1, 0.91, 25)];
        assert_eq!(threshold(&tl, &group, 0.9), (Some(25), Some(2)));
        assert_eq!(threshold(&tl, &group, 0.99), (None, None));
    }

    #[test]
    fn record_summary_uses_latest_values() {
        let recs = vec![
            MetricRecord::new(5, 0, "f1", 0.4).unwrap(),
            MetricRecord::new(9, 0, "f1", 0.92).unwrap(),
            MetricRecord::new(9, 1, "f1", 0.95).unwrap(),
            MetricRecord::new(9, 1, "bytes_sent", 300.0).unwrap(),
        ];
        let s = summarize_records(&recs, 0.9);
        assert_eq!(s.final_f1[&0], 0.92);
        assert_eq!(s.time_to_threshold_ms, Some(9));
        assert_eq!(s.bytes_sent[&1], 300.0);
    }
}
