use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dfl_core::controller::{self, ControllerError, TransportSpec};
use dfl_core::monitoring::{self, ExportFormat};
use dfl_core::topology::Topology;

#[derive(Parser)]
#[command(name = "dflsim", version, about = "Run and inspect decentralized federated learning scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum TopologyArg {
    Fully,
    Star,
    Ring,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Deploy a scenario locally and write its outputs.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the transport (tcp binds ephemeral ports).
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
    },
    /// Check a scenario file without running it.
    Validate { scenario: PathBuf },
    /// Generate an adjacency matrix file.
    Topology {
        #[arg(value_enum)]
        kind: TopologyArg,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        center: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize an exported metrics CSV.
    Report {
        records: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        target: f64,
    },
}

fn fail(e: &ControllerError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { 1 } else { 2 })
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { scenario, out, seed, transport } => {
            let mut cfg = match controller::load_scenario(&scenario) {
                Ok(cfg) => cfg,
                Err(e) => return fail(&e),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            match transport {
                Some(TransportArg::Inproc) => cfg.transport = TransportSpec::Inproc,
                Some(TransportArg::Tcp) if !matches!(cfg.transport, TransportSpec::Tcp { .. }) => {
                    cfg.transport = TransportSpec::Tcp { base_port: 0 }
                }
                _ => {}
            }
            match controller::run_scenario(&cfg, Some(&out)) {
                Ok(result) => {
                    print!("{}", result.report);
                    println!("outputs written to {}", out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Validate { scenario } => match controller::load_scenario(&scenario) {
            Ok(cfg) => {
                println!("ok: {} ({}, {} rounds)", cfg.name, cfg.architecture, cfg.rounds);
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Topology { kind, n, p, seed, center, out } => {
            let topo = match kind {
                TopologyArg::Fully => Topology::fully_connected(n),
                TopologyArg::Star => Topology::star(n, center),
                TopologyArg::Ring => Topology::ring(n),
                TopologyArg::Random => Topology::random_connected(n, p, seed),
            };
            match topo.and_then(|t| t.save(&out).map(|()| t)) {
                Ok(t) => {
                    println!("{} nodes, {} edges -> {}", t.n(), t.edge_count(), out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
        Command::Report { records, target } => match monitoring::import(ExportFormat::Csv, &records) {
            Ok(recs) => {
                print!("{}", controller::summarize_records(&recs, target));
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
    }
}
