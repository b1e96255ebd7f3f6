use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use topoman::manager::{run_path_verification, PathOutcome, PathSpec};
use topoman::probe::DEFAULT_TTL_MAX;
use topoman::sim::Simulation;
use topoman::suite::{run_suite, Execution, ExperimentSpec, Heuristic, Mode};
use topoman::topogen::{
    generate_topology, generate_tree, parse_network_config, parse_policy_config, serialize_network_config, Family,
    NetworkInstance, DEFAULT_TREE_FANOUT,
};

#[derive(Parser)]
#[command(name = "topoman", version, about = "Probe-based middlebox topology discovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a topology and emit its network configuration.
    Gen {
        #[command(flatten)]
        topo: TopoArgs,
        /// Write the configuration here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one discovery and print its transcript.
    Discover {
        #[command(flatten)]
        topo: TopoArgs,
        #[command(flatten)]
        mode: ModeArgs,
        #[arg(long, default_value = "edge")]
        heuristic: Heuristic,
        /// Record each hop in the probe payload instead of up-calling per hop.
        #[arg(long, overrides_with = "no_append")]
        append: bool,
        #[arg(long)]
        no_append: bool,
        /// Write the transcript here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Install a steering path and check it with a path-checker probe.
    VerifyPath {
        #[command(flatten)]
        topo: TopoArgs,
        /// Comma-separated device ids, source first.
        #[arg(long, value_delimiter = ',', required = true)]
        path: Vec<String>,
        #[arg(long, default_value_t = 1)]
        path_id: u32,
        /// Remove this device's steering rule before checking.
        #[arg(long)]
        skip_rule: Option<String>,
        #[arg(long, default_value_t = DEFAULT_TTL_MAX)]
        ttl_max: u32,
    },
    /// Sweep families and modes over seeds and write a CSV table.
    Suite {
        /// Comma-separated families, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        family: Vec<String>,
        #[arg(long, default_value_t = 20)]
        nodes: usize,
        /// Number of seeds, starting at --seed.
        #[arg(long, default_value_t = 30)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated heuristics from edge, random, policy.
        #[arg(long, value_delimiter = ',', default_value = "edge,random")]
        heuristic: Vec<Heuristic>,
        /// Only run append mode (default: both).
        #[arg(long, conflicts_with = "no_append")]
        append: bool,
        /// Only run non-append mode (default: both).
        #[arg(long)]
        no_append: bool,
        #[command(flatten)]
        mode: ModeArgs,
        /// Run seeds one after another instead of on the thread pool.
        #[arg(long)]
        sequential: bool,
        /// Add a wall_clock column (output is then no longer reproducible).
        #[arg(long)]
        wall_clock: bool,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TopoArgs {
    /// Read the network configuration from a file instead of generating one.
    #[arg(long, conflicts_with_all = ["family", "nodes", "fanout"])]
    config: Option<PathBuf>,
    /// Replace the instance's policy rules with those in this file.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value = "cisco")]
    family: Family,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    /// Tree fanout (tree family only).
    #[arg(long)]
    fanout: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModeArgs {
    #[arg(long)]
    header_sec: bool,
    #[arg(long)]
    payload_sec: bool,
    #[arg(long, default_value_t = DEFAULT_TTL_MAX)]
    ttl_max: u32,
    /// Pin load-balancer egress instead of predicting it from routes.
    #[arg(long)]
    static_steer: bool,
}

impl ModeArgs {
    fn mode(&self, heuristic: Heuristic, append: bool) -> Mode {
        Mode {
            heuristic,
            append,
            header_sec: self.header_sec,
            payload_sec: self.payload_sec,
            ttl_max: self.ttl_max,
            static_steer: self.static_steer,
        }
    }
}

impl TopoArgs {
    fn load(&self) -> Result<NetworkInstance> {
        let mut net = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                parse_network_config(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => {
                if self.nodes < 2 {
                    bail!("--nodes must be at least 2");
                }
                match (self.family, self.fanout) {
                    (Family::Tree, fanout) => {
                        generate_tree(self.nodes, fanout.unwrap_or(DEFAULT_TREE_FANOUT), self.seed)
                    }
                    (_, Some(_)) => bail!("--fanout only applies to the tree family"),
                    (family, None) => generate_topology(family, self.nodes, self.seed),
                }
            }
        };
        if let Some(path) = &self.policy {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            net.policies = parse_policy_config(&text).with_context(|| format!("parsing {}", path.display()))?;
        }
        Ok(net)
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { topo, out } => {
            emit(out.as_ref(), &serialize_network_config(&topo.load()?))?;
            Ok(true)
        }
        Command::Discover { topo, mode, heuristic, append, no_append, out } => {
            let net = topo.load()?;
            let mode = mode.mode(heuristic, append && !no_append);
            let mut sim = Simulation::new(&net, mode.run_config(), topo.seed);
            let outcome = sim.run_discovery();
            sim.complete_late_discovery();
            let diff = sim.diff();
            let mut text = sim.transcript().join("\n");
            text.push('\n');
            emit(out.as_ref(), &text)?;
            let m = &outcome.metrics;
            let clean = outcome.report.is_clean() && diff.is_empty();
            eprintln!(
                "mode={mode} probe_triggers={} up_calls={} selections={} sim_ticks={} residual={} verdict={}",
                m.probe_triggers,
                m.up_calls,
                m.selections,
                m.sim_ticks,
                outcome.residual.len(),
                if clean { "CLEAN" } else { "DIRTY" }
            );
            if !clean {
                eprintln!("report: {:?}", outcome.report);
                eprintln!("diff after late discovery: {diff:?}");
            }
            Ok(clean)
        }
        Command::VerifyPath { topo, path, path_id, skip_rule, ttl_max } => {
            let net = topo.load()?;
            let spec = PathSpec::new(path_id, path)?;
            let config = ModeArgs { header_sec: false, payload_sec: false, ttl_max, static_steer: false }
                .mode(Heuristic::Edge, false)
                .run_config();
            let mut sim = Simulation::new(&net, config, topo.seed);
            let outcome = match skip_rule {
                None => run_path_verification(&net.graph, &spec, &mut sim)?,
                Some(skip) => {
                    if !spec.nodes.contains(&skip) {
                        bail!("{skip} is not on the path");
                    }
                    let (mut rules, terminal) = spec.derive_rules(&net.graph)?;
                    rules.retain(|r| r.device != skip);
                    sim.install_path(spec.path_id, &rules)?;
                    sim.check_path(&spec, terminal)?
                }
            };
            match outcome {
                PathOutcome::PathOk { trace } => {
                    println!("PATHOK {}", trace.join(" -> "));
                    Ok(true)
                }
                PathOutcome::PathFail { last_good } => {
                    println!("PATHFAIL last_good={}", last_good.as_deref().unwrap_or("-"));
                    Ok(false)
                }
            }
        }
        Command::Suite {
            family,
            nodes,
            seeds,
            seed,
            heuristic,
            append,
            no_append,
            mode,
            sequential,
            wall_clock,
            out,
        } => {
            let families = if family.iter().any(|f| f == "all") {
                Family::ALL.to_vec()
            } else {
                family.iter().map(|f| f.parse::<Family>().map_err(anyhow::Error::msg)).collect::<Result<_>>()?
            };
            let appends: &[bool] = match (append, no_append) {
                (true, _) => &[true],
                (_, true) => &[false],
                _ => &[false, true],
            };
            let modes = heuristic.iter().flat_map(|&h| appends.iter().map(move |&a| (h, a)));
            let spec = ExperimentSpec {
                families,
                n: nodes,
                seeds: (seed..seed + seeds).collect(),
                modes: modes.map(|(h, a)| mode.mode(h, a)).collect(),
                wall_clock,
            };
            let exec = if sequential { Execution::Sequential } else { Execution::Parallel };
            let result = run_suite(&spec, exec)?;
            emit(out.as_ref(), &result.to_csv())?;
            let dirty = result.raw.iter().filter(|r| r.clean_runs < r.runs).count();
            if dirty > 0 {
                eprintln!("{dirty} of {} runs were not clean", result.raw.len());
            }
            Ok(dirty == 0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
