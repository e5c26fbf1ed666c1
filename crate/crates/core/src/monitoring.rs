//! KPI records, resource probes, CSV/JSON export and per-node log files.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::CounterSnapshot;
use crate::learning::EvalMetrics;
use crate::NodeId;

#[derive(Debug, Error)]
pub enum MonitoringError {
    #[error("metric `{0}` is not in the registry")]
    UnknownMetric(String),
    #[error("non-finite value for `{0}`")]
    NonFinite(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    FederatedModel,
    Resources,
    Communications,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::FederatedModel => "FederatedModel",
            Category::Resources => "Resources",
            Category::Communications => "Communications",
        })
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FederatedModel" => Ok(Category::FederatedModel),
            "Resources" => Ok(Category::Resources),
            "Communications" => Ok(Category::Communications),
            other => Err(format!("unknown category `{other}`")),
        }
    }
}

/// Every metric name and the category it belongs to.
pub const REGISTRY: &[(&str, Category)] = &[
    ("loss", Category::FederatedModel),
    ("accuracy", Category::FederatedModel),
    ("precision", Category::FederatedModel),
    ("recall", Category::FederatedModel),
    ("f1", Category::FederatedModel),
    ("model_size_bytes", Category::FederatedModel),
    ("sync_count", Category::FederatedModel),
    ("round", Category::FederatedModel),
    ("cpu_pct", Category::Resources),
    ("ram_pct", Category::Resources),
    ("bytes_sent", Category::Communications),
    ("bytes_received", Category::Communications),
    ("active_connections", Category::Communications),
    ("send_latency_ms", Category::Communications),
    ("msgs_sent", Category::Communications),
    ("msgs_received", Category::Communications),
];

pub fn category_of(name: &str) -> Option<Category> {
    REGISTRY.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Milliseconds since scenario start.
    pub timestamp_ms: u64,
    pub node: NodeId,
    pub category: Category,
    pub name: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(timestamp_ms: u64, node: NodeId, name: &str, value: f64) -> Result<Self, MonitoringError> {
        let category = category_of(name).ok_or_else(|| MonitoringError::UnknownMetric(name.to_string()))?;
        if !value.is_finite() {
            return Err(MonitoringError::NonFinite(name.to_string()));
        }
        Ok(Self { timestamp_ms, node, category, name: name.to_string(), value })
    }
}

/// A node's record buffer. Timestamps never go backwards per metric name.
#[derive(Debug)]
pub struct Recorder {
    node: NodeId,
    start: Instant,
    records: Vec<MetricRecord>,
    last: HashMap<String, u64>,
}

impl Recorder {
    pub fn new(node: NodeId, start: Instant) -> Self {
        Self { node, start, records: Vec::new(), last: HashMap::new() }
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.start.elapsed().as_millis() as u64
    }

    pub fn record(&mut self, name: &str, value: f64) -> Result<(), MonitoringError> {
        let now = self.elapsed_ms();
        let ts = self.last.get(name).map_or(now, |&prev| prev.max(now));
        let rec = MetricRecord::new(ts, self.node, name, value)?;
        self.last.insert(name.to_string(), ts);
        self.records.push(rec);
        Ok(())
    }

    pub fn extend(&mut self, records: Vec<MetricRecord>) {
        for rec in records {
            let ts = self.last.get(&rec.name).map_or(rec.timestamp_ms, |&prev| prev.max(rec.timestamp_ms));
            self.last.insert(rec.name.clone(), ts);
            self.records.push(MetricRecord { timestamp_ms: ts, ..rec });
        }
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricRecord> {
        self.records
    }
}

/// Process-level CPU and memory probes read from procfs.
#[derive(Debug, Default)]
pub struct ResourceProbe {
    last_cpu: Option<(Instant, u64)>,
    warned: bool,
}

/// Kernel clock ticks per second; fixed at 100 on mainstream Linux builds.
const CLOCK_TICKS: f64 = 100.0;

impl ResourceProbe {
    pub fn new() -> Self {
        Self::default()
    }

    /// CPU time of the calling thread in clock ticks.
    fn thread_ticks() -> Option<u64> {
        let stat = fs::read_to_string("/proc/thread-self/stat").ok()?;
        let rest = &stat[stat.rfind(')')? + 1..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        Some(utime + stime)
    }

    fn ram_pct() -> Option<f64> {
        let kb = |text: &str, key: &str| -> Option<f64> {
            text.lines().find(|l| l.starts_with(key))?.split_whitespace().nth(1)?.parse().ok()
        };
        let rss = kb(&fs::read_to_string("/proc/self/status").ok()?, "VmRSS:")?;
        let total = kb(&fs::read_to_string("/proc/meminfo").ok()?, "MemTotal:")?;
        (total > 0.0).then(|| 100.0 * rss / total)
    }

    /// Returns `(cpu_pct, ram_pct)`; CPU needs two samples to form a rate.
    pub fn sample(&mut self, now: Instant) -> (Option<f64>, Option<f64>) {
        let ticks = Self::thread_ticks();
        let cpu = match (ticks, self.last_cpu) {
            (Some(t), Some((then, prev))) => {
                let wall = now.saturating_duration_since(then).as_secs_f64();
                (wall > 0.0).then(|| 100.0 * (t.saturating_sub(prev) as f64 / CLOCK_TICKS) / wall)
            }
            _ => None,
        };
        if let Some(t) = ticks {
            self.last_cpu = Some((now, t));
        }
        let ram = Self::ram_pct();
        if (ticks.is_none() || ram.is_none()) && !self.warned {
            self.warned = true;
            eprintln!("warning: resource probes unavailable on this platform; cpu/ram metrics omitted");
        }
        (cpu, ram)
    }

    pub fn warned(&self) -> bool {
        self.warned
    }
}

/// What the sampler needs to know about a node.
#[derive(Debug, Clone, Default)]
pub struct NodeSnapshot {
    pub round: u32,
    pub model_size_bytes: usize,
    pub sync_count: u64,
    pub active_connections: usize,
    pub comms: CounterSnapshot,
    pub eval: Option<EvalMetrics>,
}

/// One record per registry metric whose source is available.
pub fn sample(
    node: NodeId,
    snap: &NodeSnapshot,
    probe: &mut ResourceProbe,
    now: Instant,
    timestamp_ms: u64,
) -> Vec<MetricRecord> {
    let mut values: Vec<(&str, f64)> = Vec::new();
    if let Some(m) = &snap.eval {
        values.extend([
            ("loss", m.loss),
            ("accuracy", m.accuracy),
            ("precision", m.precision),
            ("recall", m.recall),
            ("f1", m.f1),
        ]);
    }
    values.extend([
        ("model_size_bytes", snap.model_size_bytes as f64),
        ("sync_count", snap.sync_count as f64),
        ("round", f64::from(snap.round)),
    ]);
    let (cpu, ram) = probe.sample(now);
    if let Some(cpu) = cpu {
        values.push(("cpu_pct", cpu));
    }
    if let Some(ram) = ram {
        values.push(("ram_pct", ram));
    }
    values.extend([
        ("bytes_sent", snap.comms.bytes_sent as f64),
        ("bytes_received", snap.comms.bytes_received as f64),
        ("active_connections", snap.active_connections as f64),
        ("send_latency_ms", snap.comms.mean_send_latency_ms),
        ("msgs_sent", snap.comms.frames_sent as f64),
        ("msgs_received", snap.comms.frames_received as f64),
    ]);
    values
        .into_iter()
        .filter_map(|(name, value)| MetricRecord::new(timestamp_ms, node, name, value).ok())
        .collect()
}

pub const CSV_HEADER: &str = "timestamp_ms,node,category,name,value";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Values are written in shortest round-trip form, so parsing restores them bit for bit.
pub fn to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{},{},{:?}\n", r.timestamp_ms, r.node, r.category, r.name, r.value));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<MetricRecord>, MonitoringError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CSV_HEADER => {}
        _ => return Err(MonitoringError::Parse { line: 1, reason: format!("expected header `{CSV_HEADER}`") }),
    }
    let mut records = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| MonitoringError::Parse { line: i + 1, reason };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let timestamp_ms = fields[0].parse().map_err(|e| err(format!("timestamp: {e}")))?;
        let node = fields[1].parse().map_err(|e| err(format!("node: {e}")))?;
        let category: Category = fields[2].parse().map_err(err)?;
        let value = fields[4].parse().map_err(|e| err(format!("value: {e}")))?;
        records.push(MetricRecord { timestamp_ms, node, category, name: fields[3].to_string(), value });
    }
    Ok(records)
}

pub fn to_json(records: &[MetricRecord]) -> String {
    serde_json::to_string_pretty(records).expect("records serialize")
}

pub fn from_json(text: &str) -> Result<Vec<MetricRecord>, MonitoringError> {
    serde_json::from_str(text).map_err(|e| MonitoringError::Parse { line: e.line(), reason: e.to_string() })
}

pub fn export(records: &[MetricRecord], format: ExportFormat, path: impl AsRef<Path>) -> Result<(), MonitoringError> {
    let path = path.as_ref();
    let text = match format {
        ExportFormat::Csv => to_csv(records),
        ExportFormat::Json => to_json(records),
    };
    fs::write(path, text).map_err(|source| MonitoringError::Io { path: path.display().to_string(), source })
}

pub fn import(format: ExportFormat, path: impl AsRef<Path>) -> Result<Vec<MetricRecord>, MonitoringError> {
    let path = path.as_ref();
    let text =
        fs::read_to_string(path).map_err(|source| MonitoringError::Io { path: path.display().to_string(), source })?;
    match format {
        ExportFormat::Csv => from_csv(&text),
        ExportFormat::Json => from_json(&text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    Debug,
    Info,
    Warn,
    Error,
}

impl fmt::Display for LogLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogLevel::Debug => "DEBUG",
            LogLevel::Info => "INFO",
            LogLevel::Warn => "WARN",
            LogLevel::Error => "ERROR",
        })
    }
}

/// Append-only per-node log. Write failures are reported once on stderr and
/// never propagate.
#[derive(Debug)]
pub struct NodeLogger {
    node: NodeId,
    start: Instant,
    file: Option<File>,
    failed: bool,
    lines: usize,
}

impl NodeLogger {
    pub fn open(node: NodeId, start: Instant, path: Option<&Path>) -> Self {
        let mut failed = false;
        let file = path.and_then(|p| match OpenOptions::new().create(true).append(true).open(p) {
            Ok(f) => Some(f),
            Err(e) => {
                eprintln!("node {node}: cannot open log {}: {e}", p.display());
                failed = true;
                None
            }
        });
        Self { node, start, file, failed, lines: 0 }
    }

    /// A logger that only counts lines.
    pub fn disabled(node: NodeId) -> Self {
        Self { node, start: Instant::now(), file: None, failed: false, lines: 0 }
    }

    pub fn log(&mut self, level: LogLevel, text: impl fmt::Display) {
        self.lines += 1;
        let Some(file) = self.file.as_mut() else { return };
        let line = format!("{} {level} node={} {text}\n", self.start.elapsed().as_millis(), self.node);
        if let Err(e) = file.write_all(line.as_bytes()) {
            if !self.failed {
                eprintln!("node {}: log write failed, continuing without log: {e}", self.node);
                self.failed = true;
            }
        }
    }

    pub fn debug(&mut self, text: impl fmt::Display) {
        self.log(LogLevel::Debug, text);
    }

    pub fn info(&mut self, text: impl fmt::Display) {
        self.log(LogLevel::Info, text);
    }

    pub fn warn(&mut self, text: impl fmt::Display) {
        self.log(LogLevel::Warn, text);
    }

    pub fn error(&mut self, text: impl fmt::Display) {
        self.log(LogLevel::Error, text);
    }

    /// Lines attempted so far, including those that failed to write.
    pub fn lines(&self) -> usize {
        self.lines
    }
}
