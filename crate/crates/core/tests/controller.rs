use std::fs;
use std::path::Path;
use std::process::Command;

use dfl_core::aggregation::Algorithm;
use dfl_core::controller::{
    build_node_configs, load_scenario, partition_scenario, run_scenario, ControllerError, ScenarioConfig, TransportSpec,
};
use dfl_core::monitoring::{self, ExportFormat};
use dfl_core::node::{Architecture, Role};
use dfl_core::topology::Topology;

const MINIMAL: &str = "\
name: minimal
architecture: dfl
topology: {kind: fully, n: 4}
dataset: {kind: blobs}
trainer: {kind: logistic}
";

fn parse(text: &str) -> Result<ScenarioConfig, ControllerError> {
    ScenarioConfig::from_yaml(text)
}

fn quick(arch: &str, topo: &str, n: usize, rounds: usize) -> String {
    format!(
        "name: quick-{arch}\narchitecture: {arch}\ntopology: {{kind: {topo}, n: {n}}}\n\
         dataset: {{kind: blobs, samples: 600, classes: 3}}\ntrainer: {{kind: logistic}}\n\
         rounds: {rounds}\nepochs: 3\nround_timeout_s: 5\nmonitor_period_s: 0.5\n\
         heartbeat: {{period_ms: 100}}\nseed: 3\n"
    )
}

#[test]
fn minimal_scenario_gets_defaults() {
    let cfg = parse(MINIMAL).unwrap();
    assert_eq!(cfg.rounds, 10);
    assert_eq!(cfg.epochs, 20);
    assert_eq!(cfg.round_timeout_s, 30.0);
    assert_eq!(cfg.monitor_period_s, 5.0);
    assert_eq!(cfg.aggregator, Algorithm::FedAvg);
    assert_eq!(cfg.transport, TransportSpec::Inproc);
    assert_eq!(cfg.global_timeout_ms(), 3 * 10 * 30_000);
    assert_eq!(parse(&cfg.to_yaml()).unwrap(), cfg);
}

#[test]
fn invalid_corpus_is_rejected_with_the_right_class() {
    let unknown = |e: &ControllerError| matches!(e, ControllerError::UnknownField(_));
    let invalid = |e: &ControllerError| matches!(e, ControllerError::InvalidScenario(_));
    let parse_err = |e: &ControllerError| matches!(e, ControllerError::Parse(_));
    let cases: Vec<(&str, String, &dyn Fn(&ControllerError) -> bool, &str)> = vec![
        ("unknown top-level key", format!("{MINIMAL}colour: blue\n"), &unknown, "colour"),
        ("unknown nested key", MINIMAL.replace("{kind: logistic}", "{kind: logistic, depth: 3}"), &unknown, "depth"),
        ("cfl on a ring", MINIMAL.replace("dfl", "cfl").replace("fully", "ring"), &invalid, "star"),
        (
            "krum with too few vectors",
            format!("{MINIMAL}aggregator: {{name: krum, f: 1}}\n"),
            &invalid,
            "krum",
        ),
        (
            "trimmed mean trimming everything",
            format!("{MINIMAL}aggregator: {{name: trimmed_mean, k_trim: 3}}\n"),
            &invalid,
            "trimmed_mean",
        ),
        (
            "sdfl schedule names a missing node",
            MINIMAL.replace("dfl", "sdfl") + "schedule: [0, 1, 9]\n",
            &invalid,
            "schedule",
        ),
        ("autoencoder on blobs", MINIMAL.replace("logistic", "autoencoder"), &invalid, "autoencoder"),
        ("zero rounds", format!("{MINIMAL}rounds: 0\n"), &invalid, "rounds"),
        (
            "fault past the last round",
            format!("{MINIMAL}rounds: 3\nfaults: [{{node: 1, kill_at_round: 5}}]\n"),
            &invalid,
            "fault",
        ),
        ("missing required field", MINIMAL.replace("trainer: {kind: logistic}\n", ""), &parse_err, "trainer"),
    ];
    assert_eq!(cases.len(), 10);
    for (what, text, class, needle) in cases {
        let err = parse(&text).expect_err(what);
        assert!(class(&err), "{what}: wrong class {err:?}");
        assert!(err.to_string().contains(needle), "{what}: `{err}` does not mention `{needle}`");
    }
}

#[test]
fn roles_and_links_follow_the_architecture() {
    let cfl = parse(&quick("cfl", "star", 5, 1)).unwrap();
    let topo = cfl.topology().unwrap();
    let (ds, shards) = partition_scenario(&cfl, 5).unwrap();
    assert_eq!(shards.len(), 4);
    assert!(!shards.contains_key(&0));
    let addrs: Vec<String> = (0..5).map(|i| format!("a{i}")).collect();
    let nodes = build_node_configs(&cfl, &topo, &addrs, &shards, ds.dim(), None).unwrap();
    assert_eq!(nodes[0].role, Role::Server);
    assert_eq!(nodes[0].expected, vec![1, 2, 3, 4]);
    assert!(nodes[1..].iter().all(|n| n.role == Role::Trainer && n.upstream == Some(0)));

    let sdfl = parse(&quick("sdfl", "fully", 3, 1)).unwrap();
    let topo = sdfl.topology().unwrap();
    let (ds, shards) = partition_scenario(&sdfl, 3).unwrap();
    let nodes = build_node_configs(&sdfl, &topo, &addrs[..3], &shards, ds.dim(), None).unwrap();
    assert!(nodes.iter().all(|n| n.schedule == vec![0, 1, 2]));

    let dfl = parse(&quick("dfl", "fully", 4, 1)).unwrap();
    let topo = dfl.topology().unwrap();
    let (ds, shards) = partition_scenario(&dfl, 4).unwrap();
    let nodes = build_node_configs(&dfl, &topo, &addrs[..4], &shards, ds.dim(), None).unwrap();
    let dials: usize = nodes.iter().map(|n| n.initiate.len()).sum();
    assert_eq!(dials, 6);
    assert!(nodes.iter().all(|n| n.role == Role::Aggregator));
}

#[test]
fn healthy_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&quick("dfl", "fully", 4, 3)).unwrap();
    let result = run_scenario(&cfg, Some(dir.path())).unwrap();
    assert_eq!(result.report.nodes.len(), 4);
    assert!(result.report.incomplete_nodes.is_empty());
    for node in &result.nodes {
        assert_eq!(node.outcomes.len(), 3);
        assert!(node.completed);
        let f1s = node.records.iter().filter(|r| r.name == "f1").count();
        assert!(f1s >= 3, "node {} has {f1s} f1 records", node.id);
    }
    for name in ["report.json", "metrics.csv", "metrics.json", "summary.txt", "node0.log", "node3.log"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let csv = monitoring::import(ExportFormat::Csv, dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, result.records);
    let json = monitoring::import(ExportFormat::Json, dir.path().join("metrics.json")).unwrap();
    assert_eq!(json, result.records);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["nodes"].as_array().unwrap().len(), 4);
    let log = fs::read_to_string(dir.path().join("node0.log")).unwrap();
    assert!(log.contains("phase Idle -> Training"));
    assert!(log.contains("DEBUG") && log.contains("send PARAMS"));
}

#[test]
fn threshold_is_absent_when_never_met() {
    let mut cfg = parse(&quick("dfl", "ring", 4, 2)).unwrap();
    cfg.f1_target = 1.0;
    cfg.epochs = 1;
    cfg.trainer.alpha = 0.0;
    let result = run_scenario(&cfg, None).unwrap();
    assert!(result.report.mean_final_f1.unwrap() < 1.0);
    assert_eq!(result.report.time_to_threshold_ms, None);
    assert_eq!(result.report.rounds_to_threshold, None);
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_dflsim")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into(), String::from_utf8_lossy(&out.stderr).into())
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.yaml", &quick("dfl", "ring", 4, 2));
    let bad = write(dir.path(), "bad.yaml", &MINIMAL.replace("dfl", "cfl").replace("fully", "ring"));

    let (code, out, _) = cli(&["validate", &good]);
    assert_eq!(code, 0, "{out}");
    let (code, _, err) = cli(&["validate", &bad]);
    assert_eq!(code, 1);
    assert!(err.contains("star"), "{err}");

    let missing = dir.path().join("absent.yaml").display().to_string();
    let (code, _, _) = cli(&["validate", &missing]);
    assert_eq!(code, 2);

    let out_dir = dir.path().join("run");
    let (code, out, err) = cli(&["run", &good, "--out", out_dir.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(code, 0, "{out}{err}");
    assert!(out_dir.join("metrics.csv").exists());

    let (code, out, _) = cli(&["report", out_dir.join("metrics.csv").to_str().unwrap(), "--target", "0.5"]);
    assert_eq!(code, 0);
    assert!(out.contains("4 nodes"), "{out}");
}

#[test]
fn cli_topology_file_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    let (code, _, err) = cli(&["topology", "ring", "--n", "5", "--out", path.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    let topo = Topology::load(&path).unwrap();
    assert_eq!(topo.adjacency(), Topology::ring(5).unwrap().adjacency());

    // A custom topology file referenced relative to the scenario file.
    let text = MINIMAL.replace("{kind: fully, n: 4}", "{kind: custom, file: t.txt}");
    let scenario = write(dir.path(), "custom.yaml", &text);
    let cfg = load_scenario(&scenario).unwrap();
    assert_eq!(cfg.topology().unwrap().adjacency(), topo.adjacency());
    assert_eq!(cfg.architecture, Architecture::Dfl);
}
