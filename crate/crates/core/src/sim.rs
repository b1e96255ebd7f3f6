//! Deterministic discrete-event simulation of discovery and path checks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::net::Ipv4Addr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::agent::{Action, AgentState, DropReason, EgressMode, Forwarding, PathAction, TokenResolver};
use crate::manager::{
    compute_edge_set, verify_offline, EdgeHeuristicKind, IslandTransit, PathOutcome, PathRuleSpec, PathSpec, Selection,
    SelectionMode, Termination, TopologyManager, TrafficObservation, VerificationReport,
};
use crate::messages::{ApiMessage, ResolveProbeId, ResolveReply};
use crate::model::{diff_graphs, Endpoint, GraphDiff, Link, TopologyGraph};
use crate::probe::{decode_message, ProbeFlags, ProbeKind, DEFAULT_TTL_MAX};
use crate::security::ControllerKeyPair;
use crate::topogen::NetworkInstance;

/// Simulated milliseconds between agent heartbeats.
pub const HEARTBEAT_INTERVAL: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("{0} is not attached to an edge switch")]
    NotEdgeAttached(Endpoint),
    #[error("unknown device {0}")]
    UnknownDevice(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunConfig {
    pub selection: SelectionMode,
    pub edge_heuristic: EdgeHeuristicKind,
    pub flags: ProbeFlags,
    pub ttl_max: u32,
    pub egress_mode: EgressMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            selection: SelectionMode::EdgeHeuristic,
            edge_heuristic: EdgeHeuristicKind::InterfaceBased,
            flags: ProbeFlags::default(),
            ttl_max: DEFAULT_TTL_MAX,
            egress_mode: EgressMode::RoutePredict,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    /// Probes originated by source middleboxes.
    pub probe_triggers: u64,
    /// PROBE-UPDATE messages received during discovery.
    pub up_calls: u64,
    pub corrections: u64,
    pub resolves: u64,
    pub heartbeats: u64,
    pub alerts: u64,
    pub rejected_reports: u64,
    pub selections: u64,
    pub sim_ticks: u64,
    pub probes_emitted: u64,
    pub probes_consumed: u64,
    pub probes_dropped: u64,
    pub hit_round_cap: bool,
    pub wall_clock: f64,
}

#[derive(Debug, Clone)]
pub struct DiscoveryOutcome {
    pub graph: TopologyGraph,
    pub metrics: Metrics,
    pub report: VerificationReport,
    pub residual: BTreeSet<Endpoint>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    AgentCommand {
        device: String,
        text: String,
    },
    /// Probe bytes arriving on a middlebox interface from `from`.
    Deliver {
        device: String,
        interface: String,
        from: String,
        bytes: Vec<u8>,
    },
    /// Probe bytes arriving at an island border port.
    SwitchArrive {
        port: Endpoint,
        target: Ipv4Addr,
        from: String,
        bytes: Vec<u8>,
    },
    ToController {
        text: String,
    },
}

#[derive(Debug)]
struct Event {
    time: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed for a min-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

/// Independent streams so that switching security on or off never shifts
/// the draws used for selection or egress.
struct Streams {
    select: ChaCha8Rng,
    egress: ChaCha8Rng,
    crypto: ChaCha8Rng,
    token: ChaCha8Rng,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum PathEvent {
    Ok(Vec<String>),
    Broken { last_good: Option<String> },
}

struct Resolver<'a> {
    manager: &'a TopologyManager,
    now: u64,
    count: &'a mut u64,
}

impl TokenResolver for Resolver<'_> {
    fn resolve_probe_id(&mut self, device: &str, token: u64) -> Option<(Ipv4Addr, Ipv4Addr)> {
        *self.count += 1;
        let req = ApiMessage::ResolveProbeId(ResolveProbeId { device: device.to_string(), token }).encode();
        let ApiMessage::ResolveProbeId(req) = ApiMessage::decode(&req).expect("own encoding") else { unreachable!() };
        let reply = ResolveReply { token: req.token, pair: self.manager.resolve_probe_id(req.token, self.now) };
        match ApiMessage::decode(&ApiMessage::ResolveReply(reply).encode()).expect("own encoding") {
            ApiMessage::ResolveReply(r) => r.pair,
            _ => unreachable!(),
        }
    }
}

pub struct Simulation<'a> {
    net: &'a NetworkInstance,
    config: RunConfig,
    manager: TopologyManager,
    agents: BTreeMap<String, AgentState>,
    last_heartbeat: u64,
    queue: BinaryHeap<Event>,
    seq: u64,
    now: u64,
    rng: Streams,
    metrics: Metrics,
    transcript: Vec<String>,
    path_events: Vec<PathEvent>,
}

impl<'a> Simulation<'a> {
    pub fn new(net: &'a NetworkInstance, config: RunConfig, seed: u64) -> Self {
        let keys = ControllerKeyPair::generate(&mut stream(seed, 4));
        let mut manager = TopologyManager::new(keys, HEARTBEAT_INTERVAL);
        let caps = net.capabilities();
        for c in &caps {
            let text = ApiMessage::DeviceCapabilities(c.clone()).encode();
            let Ok(ApiMessage::DeviceCapabilities(c)) = ApiMessage::decode(&text) else { unreachable!() };
            manager.register_capabilities(&c).expect("instance device ids are unique");
        }
        for isl in net.graph.islands.values() {
            manager.register_island(isl.clone());
        }
        for ep in &net.edge_facing {
            manager.flag_edge_facing(ep).expect("edge flags name known interfaces");
        }
        let policies = (config.edge_heuristic == EdgeHeuristicKind::PolicyBased).then_some(net.policies.as_slice());
        let edge = compute_edge_set(&caps, policies, config.edge_heuristic).expect("policies supplied");
        manager.set_edge_set(&edge);
        let pub_key = manager.public_key().clone();
        let agents = net
            .graph
            .middleboxes
            .values()
            .map(|m| {
                let mut a = AgentState::new(m.clone(), pub_key.clone(), config.ttl_max);
                a.security_policy = config.flags;
                a.egress_mode = config.egress_mode;
                (m.id.clone(), a)
            })
            .collect();
        Simulation {
            net,
            config,
            manager,
            agents,
            last_heartbeat: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            now: 0,
            rng: Streams {
                select: stream(seed, 0),
                egress: stream(seed, 1),
                crypto: stream(seed, 2),
                token: stream(seed, 3),
            },
            metrics: Metrics::default(),
            transcript: Vec::new(),
            path_events: Vec::new(),
        }
    }

    pub fn manager(&self) -> &TopologyManager {
        &self.manager
    }

    pub fn agent_mut(&mut self, device: &str) -> Option<&mut AgentState> {
        self.agents.get_mut(device)
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn transcript(&self) -> &[String] {
        &self.transcript
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    fn log(&mut self, line: String) {
        self.transcript.push(format!("{} {line}", self.now));
    }

    fn schedule(&mut self, delay: u64, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Event { time: self.now + delay, seq: self.seq, kind });
    }

    fn heartbeats(&mut self) {
        if self.now < self.last_heartbeat + HEARTBEAT_INTERVAL {
            return;
        }
        self.last_heartbeat = self.now;
        let ids: Vec<String> = self.agents.keys().cloned().collect();
        for id in &ids {
            let hb = ApiMessage::Heartbeat(self.agents[id].heartbeat_tick(self.now)).encode();
            if let Ok(ApiMessage::Heartbeat(hb)) = ApiMessage::decode(&hb) {
                self.manager.failure_detector.observe(&hb);
                self.metrics.heartbeats += 1;
            }
        }
        self.log(format!("HEARTBEAT devices={}", ids.len()));
    }

    /// Selection rounds until the controller reports Done.
    pub fn run_discovery(&mut self) -> DiscoveryOutcome {
        let start = Instant::now();
        let cap = 20 * self.agents.len() as u64 + 100;
        let residual = loop {
            self.heartbeats();
            if let Termination::Done { residual } = self.manager.check_termination() {
                break residual;
            }
            if self.metrics.selections >= cap {
                self.metrics.hit_round_cap = true;
                self.log("CAP".into());
                break self.manager.undiscovered();
            }
            let Selection::Pair { src, dst } =
                self.manager.select_probe_pair(self.config.selection, &mut self.rng.select)
            else {
                self.log("EXHAUSTED".into());
                continue;
            };
            self.metrics.selections += 1;
            self.log(format!("SELECT {src} {dst}"));
            let init = self
                .manager
                .build_probe_init(&src, &dst, self.config.flags, self.config.ttl_max, self.now, &mut self.rng.token)
                .expect("selected interfaces are registered");
            let text = ApiMessage::ProbeInit(init).encode();
            self.schedule(0, EventKind::AgentCommand { device: src.node.clone(), text });
            self.drain();
            self.manager.end_round(self.now);
            debug_assert_eq!(
                self.metrics.probes_emitted,
                self.metrics.probes_consumed + self.metrics.probes_dropped,
                "probe conservation"
            );
            self.now += 1;
        };
        let report = verify_offline(self.manager.graph(), &self.net.graph, &residual);
        self.metrics.sim_ticks = self.now;
        self.metrics.wall_clock = start.elapsed().as_secs_f64();
        self.log(format!(
            "DONE links={} residual={} missing={} extra={} clean={}",
            self.manager.graph().links.len(),
            residual.len(),
            report.missing_links.len(),
            report.extra_links.len(),
            report.is_clean()
        ));
        DiscoveryOutcome { graph: self.manager.graph().clone(), metrics: self.metrics.clone(), report, residual }
    }

    fn drain(&mut self) {
        while let Some(ev) = self.queue.pop() {
            self.now = self.now.max(ev.time);
            match ev.kind {
                EventKind::AgentCommand { device, text } => self.on_command(&device, &text),
                EventKind::Deliver { device, interface, from, bytes } => {
                    self.on_deliver(&device, &interface, &from, &bytes)
                }
                EventKind::SwitchArrive { port, target, from, bytes } => self.on_switch(&port, target, &from, bytes),
                EventKind::ToController { text } => self.on_controller(&text),
            }
        }
    }

    fn on_command(&mut self, device: &str, text: &str) {
        let Ok(ApiMessage::ProbeInit(init)) = ApiMessage::decode(text) else {
            self.log(format!("BADCMD {device}"));
            return;
        };
        let agent = &self.agents[device];
        match agent.handle_probe_init(&init, &mut self.rng.crypto) {
            Ok(origins) => {
                self.log(format!("INIT {device} probes={}", origins.len()));
                for o in origins {
                    self.metrics.probe_triggers += 1;
                    self.metrics.probes_emitted += 1;
                    if let Some(r) = o.report {
                        self.send_to_controller(ApiMessage::ProbeUpdate(r));
                    }
                    self.transmit(device, o.forward);
                }
            }
            Err(e) => self.log(format!("INITFAIL {device} {e}")),
        }
    }

    fn send_to_controller(&mut self, msg: ApiMessage) {
        self.schedule(0, EventKind::ToController { text: msg.encode() });
    }

    fn drop_probe(&mut self, what: String) {
        self.metrics.probes_dropped += 1;
        self.log(format!("DROP {what}"));
    }

    fn transmit(&mut self, from: &str, fwd: Forwarding) {
        if let Some(c) = fwd.correction.clone() {
            self.send_to_controller(ApiMessage::UpdateOutInterface(c));
        }
        let ep = Endpoint::new(from, &fwd.egress);
        let Some(other) = self.net.graph.link_at(&ep).and_then(|l| l.other(&ep)).cloned() else {
            self.drop_probe(format!("{ep} unwired"));
            return;
        };
        let bytes = fwd.probe.encode();
        if self.net.graph.middleboxes.contains_key(&other.node) {
            self.schedule(
                1,
                EventKind::Deliver { device: other.node, interface: other.port, from: from.to_string(), bytes },
            );
        } else {
            self.schedule(
                1,
                EventKind::SwitchArrive { port: other, target: fwd.link_target, from: from.to_string(), bytes },
            );
        }
    }

    /// SDN controller model: packet-in at the ingress port, shortest path
    /// across the island, packet-out toward the owner of `target`.
    fn on_switch(&mut self, ingress: &Endpoint, target: Ipv4Addr, from: &str, bytes: Vec<u8>) {
        let g = &self.net.graph;
        let island = g.island_of_switch(&ingress.node).expect("border port belongs to an island");
        let exit = island.border_ports.iter().find_map(|p| {
            let mb = g.link_at(p)?.other(p)?;
            let iface = g.middleboxes.get(&mb.node)?.interface(&mb.port)?;
            (iface.ip == target).then(|| (p.clone(), mb.clone()))
        });
        let Some((egress, mb)) = exit else {
            self.drop_probe(format!("{} no port toward {target}", island.id));
            return;
        };
        let path = island.switch_path(&ingress.node, &egress.node).map(|p| p.join(",")).unwrap_or_default();
        let island_id = island.id.clone();
        self.log(format!("TRANSIT {island_id} in={ingress} out={egress} via={path}"));
        if let Ok(msg) = decode_message(&bytes) {
            if msg.header.path_id == 0 {
                let transit = IslandTransit {
                    pair: msg.header.pair,
                    ttl: msg.header.probe_ttl,
                    island: island_id,
                    ingress: ingress.clone(),
                    egress,
                };
                match self.manager.record_island_transit(transit) {
                    Ok(links) => self.log_links(&links),
                    Err(e) => self.log(format!("REJECT transit {e}")),
                }
            }
        }
        self.schedule(1, EventKind::Deliver { device: mb.node, interface: mb.port, from: from.to_string(), bytes });
    }

    fn log_links(&mut self, links: &[Link]) {
        for l in links {
            self.log(format!("LINK {l}"));
        }
    }

    fn on_deliver(&mut self, device: &str, interface: &str, from: &str, bytes: &[u8]) {
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => {
                self.drop_probe(format!("{device} malformed {e}"));
                return;
            }
        };
        if msg.header.kind() == ProbeKind::PathChecker {
            self.on_path_probe(device, interface, from, &msg);
            return;
        }
        let agent = self.agents.get_mut(device).expect("delivery to known device");
        let mut resolver = Resolver { manager: &self.manager, now: self.now, count: &mut self.metrics.resolves };
        let action =
            agent.handle_incoming_probe(&msg, interface, &mut resolver, &mut self.rng.egress, &mut self.rng.crypto);
        match action {
            Ok(Action::UpCallAndForward { report, forward }) => {
                self.log(format!("HOP {device} in={interface} out={} ttl={}", forward.egress, report.ttl));
                self.send_to_controller(ApiMessage::ProbeUpdate(report));
                self.transmit(device, forward);
            }
            Ok(Action::AppendAndForward { forward }) => {
                self.log(format!(
                    "HOP {device} in={interface} out={} ttl={}",
                    forward.egress, forward.probe.header.probe_ttl
                ));
                self.transmit(device, forward);
            }
            Ok(Action::TerminalUpCall { report }) => {
                self.metrics.probes_consumed += 1;
                self.log(format!("TERMINAL {device} in={interface} ttl={}", report.ttl));
                self.send_to_controller(ApiMessage::ProbeUpdate(report));
            }
            Ok(Action::Drop { reason: DropReason::TtlExpired }) => self.drop_probe(format!("{device} ttl")),
            Ok(Action::Drop { reason: DropReason::UnresolvableToken(t) }) => {
                self.metrics.alerts += 1;
                self.log(format!("ALERT {device} unresolvable token {t:#018x}"));
                self.drop_probe(format!("{device} token"));
            }
            Err(e) => self.drop_probe(format!("{device} {e}")),
        }
    }

    fn on_controller(&mut self, text: &str) {
        let msg = match ApiMessage::decode(text) {
            Ok(m) => m,
            Err(e) => {
                self.metrics.rejected_reports += 1;
                self.log(format!("REJECT {e}"));
                return;
            }
        };
        let result = match &msg {
            ApiMessage::ProbeUpdate(u) if u.path_id != 0 => {
                let trace = match &u.payload {
                    crate::probe::Payload::Entries(e) => e.iter().map(|e| e.device_id.clone()).collect(),
                    crate::probe::Payload::Sealed(_) => Vec::new(),
                };
                self.log(format!("PATHOK {} path={}", u.device, u.path_id));
                self.path_events.push(PathEvent::Ok(trace));
                return;
            }
            ApiMessage::ProbeUpdate(u) => {
                self.metrics.up_calls += 1;
                self.manager.process_probe_update(u)
            }
            ApiMessage::UpdateOutInterface(u) => {
                self.metrics.corrections += 1;
                self.log(format!("CORRECT {} ttl={} out={}", u.device, u.ttl, u.out_interface));
                self.manager.process_out_interface_update(u)
            }
            ApiMessage::Heartbeat(h) => {
                self.manager.failure_detector.observe(h);
                return;
            }
            other => {
                self.log(format!("IGNORED {}", other.name()));
                return;
            }
        };
        match result {
            Ok(links) => self.log_links(&links),
            Err(e) => {
                self.metrics.rejected_reports += 1;
                self.log(format!("REJECT {e}"));
            }
        }
    }

    /// Packet-in from data traffic on an edge-facing interface.
    pub fn inject_data_traffic(&self, ep: &Endpoint) -> Result<TrafficObservation, SimError> {
        if !self.net.edge_facing.contains(ep) {
            return Err(SimError::NotEdgeAttached(ep.clone()));
        }
        let port = self.net.edge_attachment(ep).ok_or_else(|| SimError::NotEdgeAttached(ep.clone()))?;
        Ok(TrafficObservation {
            switch: port.node,
            port: port.port,
            device: ep.node.clone(),
            interface: ep.port.clone(),
        })
    }

    /// Injects traffic on every undiscovered edge-facing interface and feeds
    /// the observations to the controller.
    pub fn complete_late_discovery(&mut self) -> Vec<Link> {
        let mut inserted = Vec::new();
        let residual: Vec<Endpoint> =
            self.manager.undiscovered().into_iter().filter(|e| self.net.edge_facing.contains(e)).collect();
        for ep in residual {
            let Ok(obs) = self.inject_data_traffic(&ep) else { continue };
            if let Ok(Some(l)) = self.manager.handle_late_discovery(&obs) {
                self.log(format!("LATE {l}"));
                inserted.push(l);
            }
        }
        inserted
    }

    pub fn diff(&self) -> GraphDiff {
        diff_graphs(self.manager.graph(), &self.net.graph)
    }

    pub fn install_path(&mut self, path_id: u32, rules: &[PathRuleSpec]) -> Result<(), SimError> {
        for r in rules {
            let agent = self.agents.get_mut(&r.device).ok_or_else(|| SimError::UnknownDevice(r.device.clone()))?;
            agent
                .install_path_rule(path_id, &r.out_interface, r.next_hop)
                .map_err(|_| SimError::UnknownDevice(r.device.clone()))?;
        }
        Ok(())
    }

    /// Sends a path-checker probe from the first node of `spec` and reports
    /// whether it reached `terminal` along exactly the configured nodes.
    pub fn check_path(&mut self, spec: &PathSpec, terminal: Ipv4Addr) -> Result<PathOutcome, SimError> {
        self.path_events.clear();
        let source = &spec.nodes[0];
        let agent = self.agents.get(source).ok_or_else(|| SimError::UnknownDevice(source.clone()))?;
        match agent.start_path_check(spec.path_id, terminal) {
            Ok(fwd) => {
                self.log(format!("PATHCHECK {source} path={}", spec.path_id));
                self.metrics.probes_emitted += 1;
                let source = source.clone();
                self.transmit(&source, fwd);
                self.drain();
            }
            Err(_) => self.path_events.push(PathEvent::Broken { last_good: None }),
        }
        self.now += 1;
        Ok(match self.path_events.pop() {
            Some(PathEvent::Ok(trace)) if trace == spec.nodes => PathOutcome::PathOk { trace },
            Some(PathEvent::Ok(trace)) => {
                let good = trace.iter().zip(&spec.nodes).take_while(|(a, b)| a == b).count();
                PathOutcome::PathFail { last_good: good.checked_sub(1).map(|i| spec.nodes[i].clone()) }
            }
            Some(PathEvent::Broken { last_good }) => PathOutcome::PathFail { last_good },
            None => PathOutcome::PathFail { last_good: None },
        })
    }

    fn on_path_probe(&mut self, device: &str, interface: &str, from: &str, msg: &crate::probe::ProbeMessage) {
        let agent = &self.agents[device];
        match agent.handle_path_checker(msg, interface) {
            Ok(PathAction::Forward(f)) => {
                self.log(format!("PATHHOP {device} in={interface} out={}", f.egress));
                self.transmit(device, f);
            }
            Ok(PathAction::PathOk(report)) => {
                self.metrics.probes_consumed += 1;
                self.send_to_controller(ApiMessage::ProbeUpdate(report));
            }
            Ok(PathAction::Drop) => {
                self.drop_probe(format!("{device} ttl"));
                self.path_events.push(PathEvent::Broken { last_good: Some(from.to_string()) });
            }
            Err(e) => {
                self.drop_probe(format!("{device} {e}"));
                self.path_events.push(PathEvent::Broken { last_good: Some(from.to_string()) });
            }
        }
    }
}

/// One full discovery run.
pub fn run_discovery(net: &NetworkInstance, config: RunConfig, seed: u64) -> DiscoveryOutcome {
    Simulation::new(net, config, seed).run_discovery()
}

/// Discovery, then traffic injection on every residual edge interface.
pub fn run_with_late_discovery(net: &NetworkInstance, config: RunConfig, seed: u64) -> (DiscoveryOutcome, GraphDiff) {
    let mut sim = Simulation::new(net, config, seed);
    let out = sim.run_discovery();
    sim.complete_late_discovery();
    (out, sim.diff())
}
