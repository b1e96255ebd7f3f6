//! Batch experiments: sweeps families and discovery modes over seeds and
//! renders per-seed and aggregate metrics as CSV.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::agent::EgressMode;
use crate::manager::{EdgeHeuristicKind, SelectionMode};
use crate::probe::{ProbeFlags, DEFAULT_TTL_MAX};
use crate::sim::{run_with_late_discovery, RunConfig};
use crate::topogen::{generate_topology, Family};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SuiteError {
    #[error("an experiment needs at least one seed")]
    NoSeeds,
    #[error("an experiment needs at least one family")]
    NoFamilies,
    #[error("an experiment needs at least one mode")]
    NoModes,
    #[error("topologies need at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("unknown heuristic {0:?} (expected edge, random or policy)")]
    UnknownHeuristic(String),
}

/// How probe pairs are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Heuristic {
    /// Edge devices from unshared interface subnets.
    Edge,
    Random,
    /// Edge devices from the policy file's endpoint networks.
    Policy,
}

impl Heuristic {
    pub const ALL: [Heuristic; 3] = [Heuristic::Edge, Heuristic::Random, Heuristic::Policy];

    fn selection(self) -> (SelectionMode, EdgeHeuristicKind) {
        match self {
            Heuristic::Edge => (SelectionMode::EdgeHeuristic, EdgeHeuristicKind::InterfaceBased),
            Heuristic::Random => (SelectionMode::RandomSelect, EdgeHeuristicKind::InterfaceBased),
            Heuristic::Policy => (SelectionMode::EdgeHeuristic, EdgeHeuristicKind::PolicyBased),
        }
    }
}

impl fmt::Display for Heuristic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Heuristic::Edge => "edge",
            Heuristic::Random => "random",
            Heuristic::Policy => "policy",
        })
    }
}

impl FromStr for Heuristic {
    type Err = SuiteError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Heuristic::ALL
            .into_iter()
            .find(|h| h.to_string() == s)
            .ok_or_else(|| SuiteError::UnknownHeuristic(s.to_string()))
    }
}

/// One discovery configuration within a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mode {
    pub heuristic: Heuristic,
    pub append: bool,
    pub header_sec: bool,
    pub payload_sec: bool,
    pub ttl_max: u32,
    pub static_steer: bool,
}

impl Default for Mode {
    fn default() -> Self {
        Mode {
            heuristic: Heuristic::Edge,
            append: false,
            header_sec: false,
            payload_sec: false,
            ttl_max: DEFAULT_TTL_MAX,
            static_steer: false,
        }
    }
}

impl Mode {
    pub fn run_config(&self) -> RunConfig {
        let (selection, edge_heuristic) = self.heuristic.selection();
        RunConfig {
            selection,
            edge_heuristic,
            flags: ProbeFlags {
                payload_append: self.append,
                header_sec: self.header_sec,
                payload_sec: self.payload_sec,
            },
            ttl_max: self.ttl_max,
            egress_mode: if self.static_steer { EgressMode::StaticSteer } else { EgressMode::RoutePredict },
        }
    }
}

/// Compact label such as `edge+append+hsec`.
impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.heuristic)?;
        if self.append {
            f.write_str("+append")?;
        }
        if self.header_sec {
            f.write_str("+hsec")?;
        }
        if self.payload_sec {
            f.write_str("+psec")?;
        }
        if self.static_steer {
            f.write_str("+static")?;
        }
        if self.ttl_max != DEFAULT_TTL_MAX {
            write!(f, "+ttl{}", self.ttl_max)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentSpec {
    pub families: Vec<Family>,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Adds a wall_clock column. Off by default since it breaks byte-identical output.
    pub wall_clock: bool,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), SuiteError> {
        if self.seeds.is_empty() {
            return Err(SuiteError::NoSeeds);
        }
        if self.families.is_empty() {
            return Err(SuiteError::NoFamilies);
        }
        if self.modes.is_empty() {
            return Err(SuiteError::NoModes);
        }
        if self.n < 2 {
            return Err(SuiteError::TooFewNodes(self.n));
        }
        Ok(())
    }

    /// Four families, both selection heuristics, both append settings.
    pub fn full_sweep(n: usize, seeds: usize) -> Self {
        let modes = [Heuristic::Edge, Heuristic::Random]
            .into_iter()
            .flat_map(|heuristic| [false, true].map(|append| Mode { heuristic, append, ..Mode::default() }))
            .collect();
        ExperimentSpec {
            families: Family::ALL.to_vec(),
            n,
            seeds: (0..seeds as u64).collect(),
            modes,
            wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Runs on the rayon pool; identical to `Sequential` without the `parallel` feature.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RowKind {
    Raw(u64),
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub kind: RowKind,
    pub family: Family,
    pub n: usize,
    pub mode: Mode,
    pub runs: usize,
    /// Runs whose report was clean and whose graph matched ground truth after late discovery.
    pub clean_runs: usize,
    pub probe_triggers: f64,
    pub up_calls: f64,
    pub sim_ticks: f64,
    pub selections: f64,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub raw: Vec<SuiteRow>,
    pub aggregate: Vec<SuiteRow>,
    wall_clock: bool,
}

pub const CSV_HEADER: &str = "row,family,n,mode,seed,runs,clean_runs,probe_triggers,up_calls,sim_ticks,selections";

impl SuiteResult {
    pub fn all_clean(&self) -> bool {
        self.raw.iter().all(|r| r.clean_runs == r.runs)
    }

    /// Raw rows first, then means; both sorted by family, mode and seed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        if self.wall_clock {
            out.push_str(",wall_clock");
        }
        out.push('\n');
        for r in self.raw.iter().chain(&self.aggregate) {
            let (row, seed) = match r.kind {
                RowKind::Raw(s) => ("raw", s.to_string()),
                RowKind::Mean => ("mean", "*".to_string()),
            };
            let _ = write!(
                out,
                "{row},{},{},{},{seed},{},{},{:.3},{:.3},{:.3},{:.3}",
                r.family, r.n, r.mode, r.runs, r.clean_runs, r.probe_triggers, r.up_calls, r.sim_ticks, r.selections
            );
            if self.wall_clock {
                let _ = write!(out, ",{:.6}", r.wall_clock);
            }
            out.push('\n');
        }
        out
    }
}

fn run_one(family: Family, n: usize, mode: Mode, seed: u64) -> SuiteRow {
    let net = generate_topology(family, n, seed);
    let (out, diff) = run_with_late_discovery(&net, mode.run_config(), seed);
    let m = &out.metrics;
    SuiteRow {
        kind: RowKind::Raw(seed),
        family,
        n,
        mode,
        runs: 1,
        clean_runs: usize::from(out.report.is_clean() && diff.is_empty()),
        probe_triggers: m.probe_triggers as f64,
        up_calls: m.up_calls as f64,
        sim_ticks: m.sim_ticks as f64,
        selections: m.selections as f64,
        wall_clock: m.wall_clock,
    }
}

fn execute(jobs: &[(Family, Mode, u64)], n: usize, exec: Execution) -> Vec<SuiteRow> {
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return jobs.par_iter().map(|&(f, m, s)| run_one(f, n, m, s)).collect();
    }
    let _ = exec;
    jobs.iter().map(|&(f, m, s)| run_one(f, n, m, s)).collect()
}

pub fn run_suite(spec: &ExperimentSpec, exec: Execution) -> Result<SuiteResult, SuiteError> {
    spec.validate()?;
    let mut jobs = Vec::with_capacity(spec.families.len() * spec.modes.len() * spec.seeds.len());
    for &f in &spec.families {
        for &m in &spec.modes {
            for &s in &spec.seeds {
                jobs.push((f, m, s));
            }
        }
    }
    jobs.sort();
    jobs.dedup();
    let raw = execute(&jobs, spec.n, exec);

    let mut aggregate: Vec<SuiteRow> = Vec::new();
    for r in &raw {
        match aggregate.last_mut() {
            Some(a) if a.family == r.family && a.mode == r.mode => {
                a.runs += 1;
                a.clean_runs += r.clean_runs;
                a.probe_triggers += r.probe_triggers;
                a.up_calls += r.up_calls;
                a.sim_ticks += r.sim_ticks;
                a.selections += r.selections;
                a.wall_clock += r.wall_clock;
            }
            _ => aggregate.push(SuiteRow { kind: RowKind::Mean, ..r.clone() }),
        }
    }
    for a in &mut aggregate {
        let k = a.runs as f64;
        a.probe_triggers /= k;
        a.up_calls /= k;
        a.sim_ticks /= k;
        a.selections /= k;
        a.wall_clock /= k;
    }
    Ok(SuiteResult { raw, aggregate, wall_clock: spec.wall_clock })
}

/// Parses the CSV written by [`SuiteResult::to_csv`] into (header, rows of fields).
pub fn parse_csv(text: &str) -> Option<(Vec<&str>, Vec<Vec<&str>>)> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    rows.iter().all(|r| r.len() == header.len()).then_some((header, rows))
}
