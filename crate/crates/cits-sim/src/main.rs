//! Command-line front door: validate topologies, run scenarios, enumerate
//! attack paths.
//!
//! Exit codes: 0 success (for `run`: no alarms), 1 operational error,
//! 2 findings (validation violations, or alarms raised during a run).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand};

use cits_sim::attack::{enumerate_attack_paths, Goal, Scenario, VulnCatalog};
use cits_sim::engine::{run_simulation, SimConfig};
use cits_sim::topology::Topology;

#[derive(Parser)]
#[command(name = "cits-sim", version, about = "C-ITS environment simulator with attack scenario injection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a topology file against the model invariants.
    Validate {
        #[arg(long)]
        topology: PathBuf,
    },
    /// Run the simulator, optionally injecting an attack scenario.
    Run {
        #[arg(long)]
        topology: PathBuf,
        /// Attack scenario file to inject.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Vulnerability catalog; defaults to `cves.json` beside the
        /// scenario file.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 60_000)]
        horizon_ms: u64,
        #[arg(long, default_value_t = 1_000)]
        tick_ms: u64,
        /// Enable the emergency-vehicle workload at this period.
        #[arg(long)]
        emergency_period_ms: Option<u64>,
        /// Write the event trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run report (JSON) here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Suppress the human-readable summary on stdout.
        #[arg(long, default_value_t = false)]
        quiet: bool,
    },
    /// Enumerate minimal feasible CVE chains reaching a goal.
    AttackPaths {
        #[arg(long)]
        topology: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        /// Attacker node id.
        #[arg(long)]
        attacker: String,
        /// Capability or effect kind, e.g. `signal-control` or `db-tamper`.
        #[arg(long)]
        goal: String,
        #[arg(long, default_value_t = 4)]
        depth: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Validate { topology } => cmd_validate(&topology),
        Command::Run {
            topology,
            scenario,
            catalog,
            seed,
            horizon_ms,
            tick_ms,
            emergency_period_ms,
            trace,
            report,
            quiet,
        } => cmd_run(RunArgs {
            topology,
            scenario,
            catalog,
            seed,
            horizon_ms,
            tick_ms,
            emergency_period_ms,
            trace,
            report,
            quiet,
        }),
        Command::AttackPaths { topology, catalog, attacker, goal, depth } => {
            cmd_attack_paths(&topology, &catalog, &attacker, &goal, depth)
        }
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}

fn cmd_validate(path: &Path) -> anyhow::Result<i32> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let topo = match Topology::parse(&text) {
        Ok(topo) => topo,
        Err(e) => {
            println!("{e}");
            return Ok(2);
        }
    };
    let violations = topo.validate();
    if violations.is_empty() {
        println!("{}: ok ({} nodes, {} links)", topo.name, topo.nodes.len(), topo.links.len());
        Ok(0)
    } else {
        for violation in &violations {
            println!("{violation}");
        }
        Ok(2)
    }
}

struct RunArgs {
    topology: PathBuf,
    scenario: Option<PathBuf>,
    catalog: Option<PathBuf>,
    seed: u64,
    horizon_ms: u64,
    tick_ms: u64,
    emergency_period_ms: Option<u64>,
    trace: Option<PathBuf>,
    report: Option<PathBuf>,
    quiet: bool,
}

fn cmd_run(args: RunArgs) -> anyhow::Result<i32> {
    let topo = Arc::new(
        Topology::load(&args.topology)
            .with_context(|| format!("loading {}", args.topology.display()))?,
    );
    let scenario = args
        .scenario
        .as_ref()
        .map(|p| Scenario::load(p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let catalog = match (&scenario, &args.catalog) {
        (None, _) => None,
        (Some(_), Some(path)) => {
            Some(VulnCatalog::load(path).with_context(|| format!("loading {}", path.display()))?)
        }
        (Some(_), None) => {
            let path = args
                .scenario
                .as_ref()
                .expect("scenario present")
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join("cves.json");
            Some(
                VulnCatalog::load(&path)
                    .with_context(|| format!("loading default catalog {}", path.display()))?,
            )
        }
    };

    let cfg = SimConfig {
        seed: args.seed,
        horizon_ms: args.horizon_ms,
        tick_ms: args.tick_ms,
        emergency_period_ms: args.emergency_period_ms,
        ..SimConfig::default()
    };
    let sim = run_simulation(topo, catalog.as_ref(), scenario.as_ref(), cfg)
        .context("simulation failed")?;

    if let Some(path) = &args.trace {
        std::fs::write(path, sim.trace_jsonl())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let report = sim.report();
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_json_string())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if !args.quiet {
        print!("{}", report.human_summary());
    }
    Ok(if sim.alarms().is_empty() { 0 } else { 2 })
}

fn cmd_attack_paths(
    topology: &Path,
    catalog: &Path,
    attacker: &str,
    goal: &str,
    depth: usize,
) -> anyhow::Result<i32> {
    let topo = Topology::load(topology)
        .with_context(|| format!("loading {}", topology.display()))?;
    let catalog =
        VulnCatalog::load(catalog).with_context(|| format!("loading {}", catalog.display()))?;
    // An attacker absent from the topology has no feasible paths; that is
    // an empty result, not an error.
    let goal = Goal::parse(goal)
        .with_context(|| format!("unknown goal {goal:?}; expected a capability or effect kind"))?;

    let paths = enumerate_attack_paths(&topo, &catalog, attacker, goal, depth);
    let mut printed = BTreeSet::new();
    for path in &paths {
        let chain = path.cve_chain().join(" → ");
        if printed.insert(chain.clone()) {
            println!("{chain}");
        }
    }
    Ok(0)
}
