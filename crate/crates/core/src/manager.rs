//! Controller-side topology inference.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::Ipv4Addr;

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::messages::{
    DeviceCapabilities, DeviceStatus, Heartbeat, OutInterfaceUpdate, ProbeInit, ProbeTarget, ProbeUpdate,
};
use crate::model::{diff_graphs, Endpoint, Link, Middlebox, ModelError, Prefix, SdnIsland, TopologyGraph};
use crate::probe::{OutInterface, Payload, PayloadEntry, ProbeFlags, ProbePairId};
use crate::security::{
    open_payload, AuthenticatedHeaderFields, ControllerKeyPair, ProbeIdToken, SecurityError, TokenRegistry,
};

/// Probe attempts allowed per unordered interface pair.
pub const MAX_ATTEMPTS: u8 = 2;
/// Rejection-sampling draws before falling back to enumeration.
const SAMPLE_TRIES: usize = 64;
/// Ticks a header token stays resolvable.
pub const TOKEN_VALIDITY: u64 = 10_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ManagerError {
    #[error("device {0} already registered")]
    DuplicateDevice(String),
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("unknown interface {0}")]
    UnknownInterface(Endpoint),
    #[error("corrupt report: {0}")]
    CorruptReport(SecurityError),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("policy-based edge detection needs policies")]
    PoliciesRequired,
    #[error("path id 0 is reserved for discovery")]
    ReservedPathId,
    #[error("path nodes {0} and {1} are not adjacent")]
    NotAdjacent(String, String),
    #[error("a path needs at least two nodes")]
    PathTooShort,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SelectionMode {
    EdgeHeuristic,
    RandomSelect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeHeuristicKind {
    InterfaceBased,
    PolicyBased,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub src_network: Prefix,
    pub dst_network: Prefix,
    pub action: String,
}

/// A device is edge when at least one of its interface subnets is shared
/// with no other middlebox (interface-based), or when one of its subnets
/// sits inside a network that only ever appears as a policy source or only
/// as a policy destination (policy-based).
pub fn compute_edge_set(
    devices: &[DeviceCapabilities],
    policies: Option<&[PolicyRule]>,
    heuristic: EdgeHeuristicKind,
) -> Result<BTreeSet<String>, ManagerError> {
    match heuristic {
        EdgeHeuristicKind::InterfaceBased => {
            let mut owners: HashMap<Prefix, BTreeSet<&str>> = HashMap::new();
            for d in devices {
                for i in &d.interfaces {
                    owners.entry(i.subnet()).or_default().insert(&d.device);
                }
            }
            Ok(devices
                .iter()
                .filter(|d| d.interfaces.iter().any(|i| owners[&i.subnet()].len() == 1))
                .map(|d| d.device.clone())
                .collect())
        }
        EdgeHeuristicKind::PolicyBased => {
            let policies = policies.ok_or(ManagerError::PoliciesRequired)?;
            let srcs: BTreeSet<Prefix> = policies.iter().map(|p| p.src_network.network()).collect();
            let dsts: BTreeSet<Prefix> = policies.iter().map(|p| p.dst_network.network()).collect();
            let endpoints: Vec<Prefix> = srcs.symmetric_difference(&dsts).copied().collect();
            Ok(devices
                .iter()
                .filter(|d| d.interfaces.iter().any(|i| endpoints.iter().any(|n| n.contains_prefix(&i.subnet()))))
                .map(|d| d.device.clone())
                .collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    Pair { src: Endpoint, dst: Endpoint },
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    Continue,
    Done { residual: BTreeSet<Endpoint> },
}

/// Island crossing reported by the SDN controller model for one probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IslandTransit {
    pub pair: ProbePairId,
    /// TTL of the middlebox hop that sent the probe into the island.
    pub ttl: u32,
    pub island: String,
    pub ingress: Endpoint,
    pub egress: Endpoint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficObservation {
    pub switch: String,
    pub port: String,
    pub device: String,
    pub interface: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct VerificationReport {
    pub missing_links: BTreeSet<Link>,
    pub extra_links: BTreeSet<Link>,
    pub late_discovery_pending: BTreeSet<Endpoint>,
}

impl VerificationReport {
    pub fn is_clean(&self) -> bool {
        self.extra_links.is_empty()
            && self.missing_links.iter().all(|l| l.endpoints().iter().any(|e| self.late_discovery_pending.contains(e)))
    }
}

pub fn verify_offline(
    discovered: &TopologyGraph,
    reference: &TopologyGraph,
    residual: &BTreeSet<Endpoint>,
) -> VerificationReport {
    let diff = diff_graphs(discovered, reference);
    let late_discovery_pending =
        diff.missing_links.iter().flat_map(|l| l.endpoints()).filter(|e| residual.contains(*e)).cloned().collect();
    VerificationReport { missing_links: diff.missing_links, extra_links: diff.extra_links, late_discovery_pending }
}

/// Controller-side heartbeat bookkeeping.
#[derive(Debug, Clone)]
pub struct FailureDetector {
    pub interval: u64,
    pub max_misses: u64,
    last_seen: BTreeMap<String, u64>,
}

impl FailureDetector {
    pub fn new(interval: u64, max_misses: u64) -> Self {
        FailureDetector { interval, max_misses, last_seen: BTreeMap::new() }
    }

    pub fn register(&mut self, device: &str, now: u64) {
        self.last_seen.insert(device.to_string(), now);
    }

    pub fn observe(&mut self, hb: &Heartbeat) {
        let slot = self.last_seen.entry(hb.device.clone()).or_insert(hb.at);
        *slot = (*slot).max(hb.at);
    }

    pub fn status(&self, device: &str, now: u64) -> Option<DeviceStatus> {
        let last = *self.last_seen.get(device)?;
        let missed = now.saturating_sub(last) / self.interval;
        Some(if missed >= self.max_misses { DeviceStatus::Down } else { DeviceStatus::Up })
    }

    pub fn down_devices(&self, now: u64) -> Vec<String> {
        self.last_seen.keys().filter(|d| self.status(d, now) == Some(DeviceStatus::Down)).cloned().collect()
    }
}

#[derive(Debug, Clone)]
struct Hop {
    device: usize,
    in_interface: Option<String>,
    out_interface: OutInterface,
}

#[derive(Debug, Clone)]
struct IfaceInfo {
    ep: Endpoint,
    device: usize,
    ip: Ipv4Addr,
}

/// Controller state: registered devices, discovered/undiscovered interfaces,
/// attempt counters and the discovered graph.
#[derive(Debug)]
pub struct TopologyManager {
    keys: ControllerKeyPair,
    tokens: TokenRegistry,
    devices: Vec<DeviceCapabilities>,
    device_index: BTreeMap<String, usize>,
    ifaces: Vec<IfaceInfo>,
    iface_index: HashMap<Endpoint, usize>,
    discovered: Vec<bool>,
    edge_facing: Vec<bool>,
    edge_device: Vec<bool>,
    attempts: HashMap<(usize, usize), u8>,
    adjacency: Vec<BTreeSet<usize>>,
    island_members: BTreeMap<String, BTreeSet<usize>>,
    graph: TopologyGraph,
    hops: HashMap<(ProbePairId, u32), Hop>,
    transits: HashMap<(ProbePairId, u32), IslandTransit>,
    pub pending_probes: BTreeSet<ProbePairId>,
    exhausted: bool,
    selections: usize,
    pub failure_detector: FailureDetector,
}

impl TopologyManager {
    pub fn new(keys: ControllerKeyPair, heartbeat_interval: u64) -> Self {
        TopologyManager {
            keys,
            tokens: TokenRegistry::new(TOKEN_VALIDITY),
            devices: Vec::new(),
            device_index: BTreeMap::new(),
            ifaces: Vec::new(),
            iface_index: HashMap::new(),
            discovered: Vec::new(),
            edge_facing: Vec::new(),
            edge_device: Vec::new(),
            attempts: HashMap::new(),
            adjacency: Vec::new(),
            island_members: BTreeMap::new(),
            graph: TopologyGraph::new(),
            hops: HashMap::new(),
            transits: HashMap::new(),
            pending_probes: BTreeSet::new(),
            exhausted: false,
            selections: 0,
            failure_detector: FailureDetector::new(heartbeat_interval, 3),
        }
    }

    pub fn public_key(&self) -> &crypto_box::PublicKey {
        self.keys.public_key()
    }

    pub fn register_capabilities(&mut self, msg: &DeviceCapabilities) -> Result<(), ManagerError> {
        if self.device_index.contains_key(&msg.device) {
            return Err(ManagerError::DuplicateDevice(msg.device.clone()));
        }
        let idx = self.devices.len();
        self.device_index.insert(msg.device.clone(), idx);
        for i in &msg.interfaces {
            let ep = Endpoint::new(&msg.device, &i.name);
            self.iface_index.insert(ep.clone(), self.ifaces.len());
            self.ifaces.push(IfaceInfo { ep, device: idx, ip: i.ip });
            self.discovered.push(false);
            self.edge_facing.push(false);
        }
        let mut mb = Middlebox::new(&msg.device, msg.kind, msg.interfaces.clone());
        mb.dynamic_egress = msg.dynamic_egress;
        self.graph.middleboxes.insert(msg.device.clone(), mb);
        self.devices.push(msg.clone());
        self.edge_device.push(false);
        self.adjacency.push(BTreeSet::new());
        self.failure_detector.register(&msg.device, 0);
        Ok(())
    }

    /// SDN islands arrive with their full internal wiring.
    pub fn register_island(&mut self, island: SdnIsland) {
        self.island_members.entry(island.id.clone()).or_default();
        self.graph.islands.insert(island.id.clone(), island);
    }

    /// Marks interfaces known in advance to face edge switches.
    pub fn flag_edge_facing(&mut self, ep: &Endpoint) -> Result<(), ManagerError> {
        let i = self.iface(ep)?;
        self.edge_facing[i] = true;
        Ok(())
    }

    pub fn set_edge_set(&mut self, edge: &BTreeSet<String>) {
        for (i, d) in self.devices.iter().enumerate() {
            self.edge_device[i] = edge.contains(&d.device);
        }
    }

    pub fn devices(&self) -> &[DeviceCapabilities] {
        &self.devices
    }

    pub fn edge_set(&self) -> BTreeSet<String> {
        self.devices.iter().zip(&self.edge_device).filter(|(_, e)| **e).map(|(d, _)| d.device.clone()).collect()
    }

    pub fn graph(&self) -> &TopologyGraph {
        &self.graph
    }

    pub fn into_graph(self) -> TopologyGraph {
        self.graph
    }

    pub fn selections(&self) -> usize {
        self.selections
    }

    pub fn undiscovered(&self) -> BTreeSet<Endpoint> {
        self.ifaces.iter().zip(&self.discovered).filter(|(_, d)| !**d).map(|(i, _)| i.ep.clone()).collect()
    }

    pub fn discovered(&self) -> BTreeSet<Endpoint> {
        self.ifaces.iter().zip(&self.discovered).filter(|(_, d)| **d).map(|(i, _)| i.ep.clone()).collect()
    }

    pub fn attempts(&self, a: &Endpoint, b: &Endpoint) -> u8 {
        match (self.iface_index.get(a), self.iface_index.get(b)) {
            (Some(&x), Some(&y)) => self.attempts.get(&ordered(x, y)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    pub fn max_attempts(&self) -> u8 {
        self.attempts.values().copied().max().unwrap_or(0)
    }

    fn iface(&self, ep: &Endpoint) -> Result<usize, ManagerError> {
        self.iface_index.get(ep).copied().ok_or_else(|| ManagerError::UnknownInterface(ep.clone()))
    }

    fn device(&self, id: &str) -> Result<usize, ManagerError> {
        self.device_index.get(id).copied().ok_or_else(|| ManagerError::UnknownDevice(id.to_string()))
    }

    fn adjacent(&self, a: usize, b: usize) -> bool {
        self.adjacency[a].contains(&b)
    }

    fn eligible(&self, s: usize, d: usize) -> bool {
        let (ds, dd) = (self.ifaces[s].device, self.ifaces[d].device);
        ds != dd && self.attempts.get(&ordered(s, d)).copied().unwrap_or(0) < MAX_ATTEMPTS && !self.adjacent(ds, dd)
    }

    /// Uniform draw over eligible pairs in `srcs × dsts`.
    fn sample<R: Rng>(&self, srcs: &[usize], dsts: &[usize], rng: &mut R) -> Option<(usize, usize)> {
        if srcs.is_empty() || dsts.is_empty() {
            return None;
        }
        for _ in 0..SAMPLE_TRIES {
            let s = srcs[rng.gen_range(0..srcs.len())];
            let d = dsts[rng.gen_range(0..dsts.len())];
            if self.eligible(s, d) {
                return Some((s, d));
            }
        }
        let count: usize = srcs.iter().map(|&s| dsts.iter().filter(|&&d| self.eligible(s, d)).count()).sum();
        if count == 0 {
            return None;
        }
        let mut k = rng.gen_range(0..count);
        for &s in srcs {
            for &d in dsts {
                if self.eligible(s, d) {
                    if k == 0 {
                        return Some((s, d));
                    }
                    k -= 1;
                }
            }
        }
        unreachable!("counted eligible pair not found")
    }

    /// Probe pairs come from undiscovered interfaces that are not known to
    /// face edge switches. A pair is skipped once attempted twice or when its
    /// devices are already known to be adjacent.
    pub fn select_probe_pair<R: Rng>(&mut self, mode: SelectionMode, rng: &mut R) -> Selection {
        let pool: Vec<usize> =
            (0..self.ifaces.len()).filter(|&i| !self.discovered[i] && !self.edge_facing[i]).collect();
        let mut choice = None;
        if mode == SelectionMode::EdgeHeuristic {
            let edge: Vec<usize> = pool.iter().copied().filter(|&i| self.edge_device[self.ifaces[i].device]).collect();
            choice = self.sample(&edge, &edge, rng);
        }
        if choice.is_none() {
            choice = self.sample(&pool, &pool, rng);
        }
        if choice.is_none() {
            let all: Vec<usize> = (0..self.ifaces.len()).collect();
            choice = self.sample(&pool, &all, rng);
        }
        match choice {
            Some((s, d)) => {
                *self.attempts.entry(ordered(s, d)).or_insert(0) += 1;
                self.selections += 1;
                Selection::Pair { src: self.ifaces[s].ep.clone(), dst: self.ifaces[d].ep.clone() }
            }
            None => {
                self.exhausted = true;
                Selection::Exhausted
            }
        }
    }

    /// PROBE-INIT for a selected pair: every interface of the destination
    /// device, the selected one first. Header security issues one token per
    /// destination address.
    pub fn build_probe_init<R: RngCore>(
        &mut self,
        src: &Endpoint,
        dst: &Endpoint,
        flags: ProbeFlags,
        ttl_max: u32,
        now: u64,
        token_rng: &mut R,
    ) -> Result<ProbeInit, ManagerError> {
        let s = self.iface(src)?;
        let d = self.iface(dst)?;
        let dev = self.ifaces[d].device;
        let mut ips = vec![self.ifaces[d].ip];
        ips.extend(self.devices[dev].interfaces.iter().map(|i| i.ip).filter(|ip| *ip != self.ifaces[d].ip));
        let src_ip = self.ifaces[s].ip;
        let targets = ips
            .into_iter()
            .map(|ip| {
                let token = flags.header_sec.then(|| self.tokens.issue((src_ip, ip), now, token_rng).0);
                ProbeTarget { ip, token }
            })
            .collect();
        Ok(ProbeInit { source: src.node.clone(), dest_device: dst.node.clone(), targets, flags, ttl_max, path_id: 0 })
    }

    pub fn resolve_probe_id(&self, token: u64, now: u64) -> Option<(Ipv4Addr, Ipv4Addr)> {
        self.tokens.resolve(ProbeIdToken(token), now).ok()
    }

    pub fn token_collisions(&self) -> u64 {
        self.tokens.collisions()
    }

    pub fn record_island_transit(&mut self, transit: IslandTransit) -> Result<Vec<Link>, ManagerError> {
        let key = (transit.pair, transit.ttl);
        self.transits.insert(key, transit);
        self.try_links(key.0, key.1)
    }

    fn decode_entries(&self, report: &ProbeUpdate) -> Result<Vec<PayloadEntry>, ManagerError> {
        match &report.payload {
            Payload::Entries(e) => Ok(e.clone()),
            Payload::Sealed(segs) => {
                let hdr = AuthenticatedHeaderFields::new(report.pair, report.flags);
                segs.iter()
                    .map(|s| {
                        let plain =
                            open_payload(s, &hdr, self.keys.private_key()).map_err(ManagerError::CorruptReport)?;
                        let line = std::str::from_utf8(&plain)
                            .map_err(|_| ManagerError::MalformedReport("segment is not UTF-8".into()))?;
                        PayloadEntry::decode_line(line).map_err(|e| ManagerError::MalformedReport(e.to_string()))
                    })
                    .collect()
            }
        }
    }

    fn check_entry(&self, e: &PayloadEntry) -> Result<usize, ManagerError> {
        let dev = self.device(&e.device_id)?;
        let names = e.in_interface.iter().map(String::as_str).chain(e.out_interface.name());
        for name in names {
            self.iface(&Endpoint::new(&e.device_id, name))?;
        }
        Ok(dev)
    }

    /// Hop records are keyed by probe identity and TTL. Non-append reports
    /// carry one hop at the report TTL; append reports carry the whole trace,
    /// hop k at TTL k.
    pub fn process_probe_update(&mut self, report: &ProbeUpdate) -> Result<Vec<Link>, ManagerError> {
        self.device(&report.device)?;
        let entries = self.decode_entries(report)?;
        let devs = entries.iter().map(|e| self.check_entry(e)).collect::<Result<Vec<_>, _>>()?;
        let base = if report.flags.payload_append {
            0
        } else {
            if entries.len() != 1 {
                return Err(ManagerError::MalformedReport(format!("{} entries without append", entries.len())));
            }
            report.ttl
        };
        let mut inserted = Vec::new();
        for (k, (e, dev)) in entries.into_iter().zip(devs).enumerate() {
            let ttl = base + k as u32;
            let mut hop = Hop { device: dev, in_interface: e.in_interface, out_interface: e.out_interface };
            if let Some(prev) = self.hops.get(&(report.pair, ttl)) {
                // A correction may overtake the report it corrects.
                if hop.out_interface == OutInterface::Pending && prev.device == dev {
                    hop.out_interface = prev.out_interface.clone();
                }
            }
            self.hops.insert((report.pair, ttl), hop);
        }
        let last = if report.flags.payload_append { report.ttl } else { base };
        for ttl in base..=last {
            inserted.extend(self.try_links(report.pair, ttl)?);
            if ttl > 0 {
                inserted.extend(self.try_links(report.pair, ttl - 1)?);
            }
        }
        Ok(inserted)
    }

    pub fn process_out_interface_update(&mut self, upd: &OutInterfaceUpdate) -> Result<Vec<Link>, ManagerError> {
        let dev = self.device(&upd.device)?;
        self.iface(&Endpoint::new(&upd.device, &upd.out_interface))?;
        let key = (upd.pair, upd.ttl);
        match self.hops.get_mut(&key) {
            Some(h) if h.device == dev => h.out_interface = upd.corrected(),
            Some(_) => return Err(ManagerError::MalformedReport("correction from a different device".into())),
            None => {
                self.hops.insert(key, Hop { device: dev, in_interface: None, out_interface: upd.corrected() });
                return Ok(Vec::new());
            }
        }
        self.try_links(upd.pair, upd.ttl)
    }

    /// Links between hop `ttl` and hop `ttl + 1` once both ends are known.
    fn try_links(&mut self, pair: ProbePairId, ttl: u32) -> Result<Vec<Link>, ManagerError> {
        let (Some(a), Some(b)) = (self.hops.get(&(pair, ttl)), self.hops.get(&(pair, ttl + 1))) else {
            return Ok(Vec::new());
        };
        let (Some(out), Some(inp)) = (a.out_interface.name(), b.in_interface.as_deref()) else {
            return Ok(Vec::new());
        };
        let x = Endpoint::new(&self.devices[a.device].device, out);
        let y = Endpoint::new(&self.devices[b.device].device, inp);
        let links = match self.transits.get(&(pair, ttl)) {
            Some(t) => vec![
                (Link::new(x, t.ingress.clone())?, Some(t.island.clone())),
                (Link::new(t.egress.clone(), y)?, Some(t.island.clone())),
            ],
            None => vec![(Link::new(x, y)?, None)],
        };
        let mut inserted = Vec::new();
        for (l, island) in links {
            if self.insert(l.clone(), island.as_deref())? {
                inserted.push(l);
            }
        }
        Ok(inserted)
    }

    fn insert(&mut self, link: Link, island: Option<&str>) -> Result<bool, ManagerError> {
        if !self.graph.insert_link(link.clone())? {
            return Ok(false);
        }
        let mbs: Vec<usize> = link.endpoints().iter().filter_map(|e| self.iface_index.get(*e).copied()).collect();
        for &i in &mbs {
            self.discovered[i] = true;
        }
        match (mbs.as_slice(), island) {
            ([x, y], _) => {
                let (dx, dy) = (self.ifaces[*x].device, self.ifaces[*y].device);
                self.adjacency[dx].insert(dy);
                self.adjacency[dy].insert(dx);
            }
            ([x], island) => {
                let dev = self.ifaces[*x].device;
                let switch = link.endpoints().into_iter().find(|e| !self.iface_index.contains_key(*e)).unwrap();
                let island = match island {
                    Some(i) => i.to_string(),
                    None => match self.graph.island_of_switch(&switch.node) {
                        Some(isl) => isl.id.clone(),
                        None => return Ok(true),
                    },
                };
                let members = self.island_members.entry(island).or_default();
                for &m in members.iter() {
                    if m != dev {
                        self.adjacency[m].insert(dev);
                        self.adjacency[dev].insert(m);
                    }
                }
                members.insert(dev);
            }
            _ => {}
        }
        Ok(true)
    }

    /// Done when only edge-facing interfaces are left or selection ran dry.
    pub fn check_termination(&self) -> Termination {
        let only_edge = (0..self.ifaces.len()).all(|i| self.discovered[i] || self.edge_facing[i]);
        if only_edge || self.exhausted {
            Termination::Done { residual: self.undiscovered() }
        } else {
            Termination::Continue
        }
    }

    pub fn handle_late_discovery(&mut self, obs: &TrafficObservation) -> Result<Option<Link>, ManagerError> {
        let ep = Endpoint::new(&obs.device, &obs.interface);
        self.iface(&ep)?;
        let link = Link::new(ep, Endpoint::new(&obs.switch, &obs.port))?;
        Ok(self.insert(link.clone(), None)?.then_some(link))
    }

    /// Drops per-probe correlation state between rounds.
    pub fn end_round(&mut self, now: u64) {
        self.hops.clear();
        self.transits.clear();
        self.pending_probes.clear();
        self.tokens.expire(now);
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// One configured hop of a verified path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathRuleSpec {
    pub device: String,
    pub out_interface: String,
    pub next_hop: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathSpec {
    pub path_id: u32,
    pub nodes: Vec<String>,
}

impl PathSpec {
    pub fn new(path_id: u32, nodes: Vec<String>) -> Result<Self, ManagerError> {
        if path_id == 0 {
            return Err(ManagerError::ReservedPathId);
        }
        if nodes.len() < 2 {
            return Err(ManagerError::PathTooShort);
        }
        Ok(PathSpec { path_id, nodes })
    }

    /// Per-device steering rules plus the terminal address, read off the
    /// reference wiring. Island-attached neighbours count as adjacent.
    pub fn derive_rules(&self, reference: &TopologyGraph) -> Result<(Vec<PathRuleSpec>, Ipv4Addr), ManagerError> {
        let mut rules = Vec::new();
        let mut terminal = None;
        for w in self.nodes.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let ma = reference.middleboxes.get(a).ok_or_else(|| ManagerError::UnknownDevice(a.clone()))?;
            let mb = reference.middleboxes.get(b).ok_or_else(|| ManagerError::UnknownDevice(b.clone()))?;
            let hop = ma
                .interfaces
                .iter()
                .find_map(|x| {
                    let ea = Endpoint::new(a, &x.name);
                    mb.interfaces.iter().find(|y| connected(reference, &ea, &Endpoint::new(b, &y.name))).map(|y| (x, y))
                })
                .ok_or_else(|| ManagerError::NotAdjacent(a.clone(), b.clone()))?;
            rules.push(PathRuleSpec { device: a.clone(), out_interface: hop.0.name.clone(), next_hop: hop.1.ip });
            terminal = Some(hop.1.ip);
        }
        Ok((rules, terminal.expect("at least one hop")))
    }
}

fn connected(g: &TopologyGraph, x: &Endpoint, y: &Endpoint) -> bool {
    let (Some(lx), Some(ly)) = (g.link_at(x), g.link_at(y)) else { return false };
    if lx == ly {
        return true;
    }
    let (Some(px), Some(py)) = (lx.other(x), ly.other(y)) else { return false };
    match (g.island_of_switch(&px.node), g.island_of_switch(&py.node)) {
        (Some(i), Some(j)) => i.id == j.id,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathOutcome {
    PathOk {
        trace: Vec<String>,
    },
    /// `last_good` is the last device that forwarded the probe correctly.
    PathFail {
        last_good: Option<String>,
    },
}

/// Installs the path's steering rules, sends a path-checker probe from its
/// first node and compares the reported trace with the configured order.
pub fn run_path_verification(
    reference: &TopologyGraph,
    spec: &PathSpec,
    sim: &mut crate::sim::Simulation<'_>,
) -> Result<PathOutcome, ManagerError> {
    let (rules, terminal) = spec.derive_rules(reference)?;
    let unknown = |e: crate::sim::SimError| ManagerError::UnknownDevice(e.to_string());
    sim.install_path(spec.path_id, &rules).map_err(unknown)?;
    sim.check_path(spec, terminal).map_err(unknown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Interface, MiddleboxKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn caps(id: &str, ifaces: &[(&str, &str, u8)]) -> DeviceCapabilities {
        DeviceCapabilities {
            device: id.into(),
            kind: MiddleboxKind::Firewall,
            dynamic_egress: false,
            interfaces: ifaces.iter().map(|(n, a, l)| Interface::new(*n, ip(a), *l)).collect(),
        }
    }

    fn manager() -> TopologyManager {
        TopologyManager::new(ControllerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(3)), 1000)
    }

    fn ep(n: &str, p: &str) -> Endpoint {
        Endpoint::new(n, p)
    }

    #[test]
    fn registration_builds_isolated_nodes() {
        let mut m = manager();
        for k in 0..20 {
            m.register_capabilities(&caps(&format!("mb{k}"), &[("eth0", &format!("10.0.{k}.1"), 30)])).unwrap();
        }
        assert_eq!(m.graph().middleboxes.len(), 20);
        assert!(m.graph().links.is_empty());
        let mut one = manager();
        one.register_capabilities(&caps("a", &[("e0", "1.0.0.1", 30), ("e1", "1.0.0.5", 30), ("e2", "1.0.0.9", 30)]))
            .unwrap();
        assert_eq!(one.undiscovered().len(), 3);
        assert_eq!(one.register_capabilities(&caps("a", &[])), Err(ManagerError::DuplicateDevice("a".into())));
    }

    #[test]
    fn interface_edge_set() {
        let devs = vec![
            caps("a", &[("e0", "192.168.7.1", 24), ("e1", "10.0.0.1", 30)]),
            caps("b", &[("e0", "10.0.0.2", 30), ("e1", "10.0.0.5", 30)]),
            caps("c", &[("e0", "10.0.0.6", 30)]),
        ];
        let edge = compute_edge_set(&devs, None, EdgeHeuristicKind::InterfaceBased).unwrap();
        assert_eq!(edge, BTreeSet::from(["a".to_string()]));
    }

    /// Brute-force oracle for the policy-based rule.
    fn policy_oracle(devs: &[DeviceCapabilities], pols: &[PolicyRule]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for d in devs {
            for i in &d.interfaces {
                for p in pols {
                    for (net, is_src) in [(p.src_network, true), (p.dst_network, false)] {
                        let other_side =
                            pols.iter().any(|q| if is_src { q.dst_network == net } else { q.src_network == net });
                        if !other_side && net.contains_prefix(&i.subnet()) {
                            out.insert(d.device.clone());
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn policy_edge_set_matches_enumeration() {
        let devs = vec![
            caps("A", &[("e0", "10.0.1.1", 24), ("e1", "30.0.0.1", 30)]),
            caps("B", &[("e0", "30.0.0.2", 30), ("e1", "30.0.0.5", 30)]),
            caps("C", &[("e0", "30.0.0.6", 30), ("e1", "30.0.0.9", 30)]),
            caps("D", &[("e0", "30.0.0.10", 30), ("e1", "30.0.0.13", 30)]),
            caps("Z", &[("e0", "30.0.0.14", 30), ("e1", "20.0.3.1", 24)]),
        ];
        let pols = vec![PolicyRule {
            src_network: "10.0.0.0/16".parse().unwrap(),
            dst_network: "20.0.0.0/16".parse().unwrap(),
            action: "allow".into(),
        }];
        let edge = compute_edge_set(&devs, Some(&pols), EdgeHeuristicKind::PolicyBased).unwrap();
        assert_eq!(edge, BTreeSet::from(["A".to_string(), "Z".to_string()]));
        assert_eq!(edge, policy_oracle(&devs, &pols));
        assert_eq!(compute_edge_set(&devs, None, EdgeHeuristicKind::PolicyBased), Err(ManagerError::PoliciesRequired));
        assert!(compute_edge_set(&devs, Some(&[]), EdgeHeuristicKind::PolicyBased).unwrap().is_empty());
    }

    fn line3() -> TopologyManager {
        let mut m = manager();
        m.register_capabilities(&caps("a", &[("e1", "10.0.0.1", 30), ("w", "192.168.0.1", 24)])).unwrap();
        m.register_capabilities(&caps("b", &[("e0", "10.0.0.2", 30), ("e1", "10.0.0.5", 30)])).unwrap();
        m.register_capabilities(&caps("c", &[("e0", "10.0.0.6", 30), ("w", "192.168.1.1", 24)])).unwrap();
        m
    }

    fn update(dev: &str, ttl: u32, entries: Vec<PayloadEntry>, append: bool) -> ProbeUpdate {
        ProbeUpdate {
            device: dev.into(),
            pair: ProbePairId::Clear { src: ip("10.0.0.1"), dst: ip("10.0.0.6") },
            ttl,
            path_id: 0,
            flags: ProbeFlags { payload_append: append, ..Default::default() },
            payload: Payload::Entries(entries),
        }
    }

    #[test]
    fn one_hop_trace_inserts_link() {
        let mut m = line3();
        let trace = vec![PayloadEntry::source("a", "e1"), PayloadEntry::terminal("b", "e0")];
        let links = m.process_probe_update(&update("b", 1, trace, true)).unwrap();
        assert_eq!(links, vec![Link::new(ep("a", "e1"), ep("b", "e0")).unwrap()]);
        assert!(m.discovered().contains(&ep("a", "e1")));
        assert!(m.discovered().contains(&ep("b", "e0")));
    }

    #[test]
    fn per_hop_reports_correlate_by_ttl() {
        let mut m = line3();
        // Out of order on purpose.
        m.process_probe_update(&update("c", 2, vec![PayloadEntry::terminal("c", "e0")], false)).unwrap();
        m.process_probe_update(&update("a", 0, vec![PayloadEntry::source("a", "e1")], false)).unwrap();
        let mid = PayloadEntry::transit("b", "e0", OutInterface::Named("e1".into()));
        let links = m.process_probe_update(&update("b", 1, vec![mid], false)).unwrap();
        assert_eq!(links.len(), 2);
        assert_eq!(m.graph().links.len(), 2);
    }

    #[test]
    fn pending_waits_for_correction() {
        let mut m = line3();
        let mid = PayloadEntry::transit("b", "e0", OutInterface::Pending);
        m.process_probe_update(&update("a", 0, vec![PayloadEntry::source("a", "e1")], false)).unwrap();
        m.process_probe_update(&update("b", 1, vec![mid], false)).unwrap();
        m.process_probe_update(&update("c", 2, vec![PayloadEntry::terminal("c", "e0")], false)).unwrap();
        assert_eq!(m.graph().links.len(), 1);
        let upd = OutInterfaceUpdate {
            device: "b".into(),
            pair: ProbePairId::Clear { src: ip("10.0.0.1"), dst: ip("10.0.0.6") },
            ttl: 1,
            out_interface: "e1".into(),
        };
        let links = m.process_out_interface_update(&upd).unwrap();
        assert_eq!(links, vec![Link::new(ep("b", "e1"), ep("c", "e0")).unwrap()]);
    }

    #[test]
    fn correction_before_report_is_kept() {
        let mut m = line3();
        let pair = ProbePairId::Clear { src: ip("10.0.0.1"), dst: ip("10.0.0.6") };
        let upd = OutInterfaceUpdate { device: "b".into(), pair, ttl: 1, out_interface: "e1".into() };
        m.process_out_interface_update(&upd).unwrap();
        m.process_probe_update(&update("c", 2, vec![PayloadEntry::terminal("c", "e0")], false)).unwrap();
        let mid = PayloadEntry::transit("b", "e0", OutInterface::Pending);
        m.process_probe_update(&update("b", 1, vec![mid], false)).unwrap();
        assert!(m.graph().links.contains(&Link::new(ep("b", "e1"), ep("c", "e0")).unwrap()));
    }

    #[test]
    fn island_transit_yields_border_links() {
        let mut m = line3();
        let island = SdnIsland {
            id: "I".into(),
            subnet: "10.0.0.0/29".parse().unwrap(),
            switches: vec!["s0".into(), "s1".into()],
            internal_links: vec![Link::new(ep("s0", "p9"), ep("s1", "p9")).unwrap()],
            border_ports: vec![ep("s0", "p1"), ep("s1", "p4")],
        };
        m.register_island(island);
        let pair = ProbePairId::Clear { src: ip("10.0.0.1"), dst: ip("10.0.0.6") };
        m.record_island_transit(IslandTransit {
            pair,
            ttl: 0,
            island: "I".into(),
            ingress: ep("s0", "p1"),
            egress: ep("s1", "p4"),
        })
        .unwrap();
        let trace = vec![PayloadEntry::source("a", "e1"), PayloadEntry::terminal("b", "e0")];
        let links = m.process_probe_update(&update("b", 1, trace, true)).unwrap();
        assert_eq!(
            links,
            vec![Link::new(ep("a", "e1"), ep("s0", "p1")).unwrap(), Link::new(ep("s1", "p4"), ep("b", "e0")).unwrap()]
        );
    }

    #[test]
    fn unknown_device_and_corrupt_reports() {
        let mut m = line3();
        let bad = update("zz", 0, vec![PayloadEntry::source("a", "e1")], false);
        assert_eq!(m.process_probe_update(&bad), Err(ManagerError::UnknownDevice("zz".into())));
        let hdr_flags = ProbeFlags { payload_sec: true, ..Default::default() };
        let pair = ProbePairId::Clear { src: ip("10.0.0.1"), dst: ip("10.0.0.6") };
        let hdr = AuthenticatedHeaderFields::new(pair, hdr_flags);
        let mut seg = crate::security::seal_payload(
            PayloadEntry::source("a", "e1").encode_line().as_bytes(),
            &hdr,
            m.public_key(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let n = seg.ciphertext.len();
        seg.ciphertext[n - 1] ^= 1;
        let rep = ProbeUpdate {
            device: "a".into(),
            pair,
            ttl: 0,
            path_id: 0,
            flags: hdr_flags,
            payload: Payload::Sealed(vec![seg]),
        };
        assert_eq!(m.process_probe_update(&rep), Err(ManagerError::CorruptReport(SecurityError::IntegrityError)));
    }

    #[test]
    fn selection_respects_attempt_cap() {
        let mut m = manager();
        m.register_capabilities(&caps("a", &[("e0", "10.0.0.1", 30)])).unwrap();
        m.register_capabilities(&caps("b", &[("e0", "10.0.0.5", 30)])).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..2 {
            assert!(matches!(m.select_probe_pair(SelectionMode::RandomSelect, &mut r), Selection::Pair { .. }));
        }
        assert_eq!(m.max_attempts(), 2);
        assert_eq!(m.select_probe_pair(SelectionMode::RandomSelect, &mut r), Selection::Exhausted);
        assert!(matches!(m.check_termination(), Termination::Done { .. }));
    }

    #[test]
    fn next_eligible_pair_after_cap() {
        let mut m = manager();
        for (k, d) in ["a", "b", "c"].iter().enumerate() {
            m.register_capabilities(&caps(d, &[("e0", &format!("10.0.{k}.1"), 30)])).unwrap();
        }
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let mut seen = BTreeMap::new();
        for _ in 0..6 {
            let Selection::Pair { src, dst } = m.select_probe_pair(SelectionMode::RandomSelect, &mut r) else {
                panic!()
            };
            let key = if src <= dst { (src, dst) } else { (dst, src) };
            *seen.entry(key).or_insert(0) += 1;
        }
        assert_eq!(seen.len(), 3);
        assert!(seen.values().all(|&c| c == 2));
        assert_eq!(m.select_probe_pair(SelectionMode::RandomSelect, &mut r), Selection::Exhausted);
    }

    #[test]
    fn edge_heuristic_prefers_edge_pairs() {
        let mut m = manager();
        let mut devs = Vec::new();
        for k in 0..10 {
            devs.push(caps(&format!("core{k}"), &[("e0", &format!("10.0.{k}.1"), 30)]));
        }
        devs.push(caps("x", &[("e0", "10.1.0.1", 30)]));
        devs.push(caps("y", &[("e0", "10.1.0.5", 30)]));
        for d in &devs {
            m.register_capabilities(d).unwrap();
        }
        m.set_edge_set(&BTreeSet::from(["x".to_string(), "y".to_string()]));
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let Selection::Pair { src, dst } = m.select_probe_pair(SelectionMode::EdgeHeuristic, &mut r) else { panic!() };
        let nodes = BTreeSet::from([src.node, dst.node]);
        assert_eq!(nodes, BTreeSet::from(["x".to_string(), "y".to_string()]));
    }

    #[test]
    fn all_discovered_is_done() {
        let mut m = line3();
        for e in [ep("a", "w"), ep("c", "w")] {
            m.flag_edge_facing(&e).unwrap();
        }
        assert_eq!(m.check_termination(), Termination::Continue);
        let trace = vec![
            PayloadEntry::source("a", "e1"),
            PayloadEntry::transit("b", "e0", OutInterface::Named("e1".into())),
            PayloadEntry::terminal("c", "e0"),
        ];
        m.process_probe_update(&update("c", 2, trace, true)).unwrap();
        assert_eq!(m.check_termination(), Termination::Done { residual: BTreeSet::from([ep("a", "w"), ep("c", "w")]) });
        let mut r = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(m.select_probe_pair(SelectionMode::RandomSelect, &mut r), Selection::Exhausted);
    }

    #[test]
    fn late_discovery_is_idempotent() {
        let mut m = line3();
        m.register_island(SdnIsland {
            id: "E".into(),
            subnet: "192.168.0.0/24".parse().unwrap(),
            switches: vec!["sw".into()],
            internal_links: vec![],
            border_ports: vec![ep("sw", "p1")],
        });
        let obs =
            TrafficObservation { switch: "sw".into(), port: "p1".into(), device: "a".into(), interface: "w".into() };
        let before = m.undiscovered().len();
        assert!(m.handle_late_discovery(&obs).unwrap().is_some());
        assert_eq!(m.undiscovered().len(), before - 1);
        assert!(m.handle_late_discovery(&obs).unwrap().is_none());
    }

    fn tiny_graph(links: &[(&str, &str, &str, &str)]) -> TopologyGraph {
        let mut g = TopologyGraph::new();
        for n in ["a", "b", "c"] {
            g.middleboxes.insert(
                n.into(),
                Middlebox::new(
                    n,
                    MiddleboxKind::Firewall,
                    vec![Interface::new("e0", ip("1.1.1.1"), 30), Interface::new("e1", ip("1.1.1.2"), 30)],
                ),
            );
        }
        for (a, x, b, y) in links {
            g.links.insert(Link::new(ep(a, x), ep(b, y)).unwrap());
        }
        g
    }

    #[test]
    fn offline_verification_classifies() {
        let reference = tiny_graph(&[("a", "e1", "b", "e0"), ("b", "e1", "c", "e0")]);
        let perfect = verify_offline(&reference, &reference, &BTreeSet::new());
        assert!(perfect.is_clean());
        let partial = tiny_graph(&[("a", "e1", "b", "e0")]);
        let late = verify_offline(&partial, &reference, &BTreeSet::from([ep("c", "e0")]));
        assert!(late.is_clean());
        assert!(!late.late_discovery_pending.is_empty());
        let core_missing = verify_offline(&partial, &reference, &BTreeSet::new());
        assert!(!core_missing.is_clean());
    }

    #[test]
    fn failure_detector_flips_at_three_misses() {
        let mut fd = FailureDetector::new(1000, 3);
        fd.register("mb", 0);
        for t in (1000..=10_000).step_by(1000) {
            fd.observe(&Heartbeat { device: "mb".into(), status: DeviceStatus::Up, at: t });
            assert_eq!(fd.status("mb", t + 999), Some(DeviceStatus::Up));
        }
        assert_eq!(fd.status("mb", 12_999), Some(DeviceStatus::Up));
        assert_eq!(fd.status("mb", 13_000), Some(DeviceStatus::Down));
        assert_eq!(fd.down_devices(13_000), vec!["mb".to_string()]);
    }

    #[test]
    fn path_spec_rejects_reserved_id() {
        assert_eq!(PathSpec::new(0, vec!["a".into(), "b".into()]), Err(ManagerError::ReservedPathId));
    }

    #[test]
    fn build_probe_init_lists_selected_first() {
        let mut m = line3();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let init = m.build_probe_init(&ep("a", "e1"), &ep("c", "w"), ProbeFlags::default(), 32, 0, &mut r).unwrap();
        let ips: Vec<_> = init.targets.iter().map(|t| t.ip).collect();
        assert_eq!(ips, vec![ip("192.168.1.1"), ip("10.0.0.6")]);
        let sec = ProbeFlags { header_sec: true, ..Default::default() };
        let init = m.build_probe_init(&ep("a", "e1"), &ep("c", "w"), sec, 32, 0, &mut r).unwrap();
        for t in &init.targets {
            assert_eq!(m.resolve_probe_id(t.token.unwrap(), 5).map(|p| p.1), Some(t.ip));
        }
    }
}
