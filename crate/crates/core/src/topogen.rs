//! Network configuration files and the evaluation topology families.
//!
//! Config format, one record per line, `#` starts a comment:
//!
//! ```text
//! [middlebox]
//! <id> <kind> [dynamic|static] <iface>=<ip>/<len> ... [edge=<iface>,...]
//! [island]
//! <id> <subnet> switches=<sw>,... ports=<sw>:<port>,... [edge]
//! [link]
//! <node>:<port> <node>:<port>
//! [route]
//! <device> <prefix> <out-iface> <next-hop-ip|DIRECT>
//! [policy]
//! <src-prefix> -> <dst-prefix> <action>
//! ```
//!
//! `edge=` flags interfaces wired to edge switches. Links between two
//! switches are island-internal.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::fmt::Write as _;
use std::net::Ipv4Addr;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manager::PolicyRule;
use crate::messages::DeviceCapabilities;
use crate::model::{
    Endpoint, Interface, Link, Middlebox, MiddleboxKind, NextHop, Prefix, RouteEntry, SdnIsland, TopologyGraph,
};
use crate::probe::is_wire_name;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopoError {
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("line {line}: inconsistent route: {msg}")]
    InconsistentRoute { line: usize, msg: String },
    #[error("line {line}: subnet mismatch: {msg}")]
    SubnetMismatch { line: usize, msg: String },
}

fn perr(line: usize, msg: impl Into<String>) -> TopoError {
    TopoError::ParseError { line, msg: msg.into() }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NetworkInstance {
    /// Ground truth: devices with routes, islands, and every link.
    pub graph: TopologyGraph,
    pub edge_facing: BTreeSet<Endpoint>,
    pub edge_islands: BTreeSet<String>,
    pub policies: Vec<PolicyRule>,
}

impl NetworkInstance {
    pub fn capabilities(&self) -> Vec<DeviceCapabilities> {
        self.graph
            .middleboxes
            .values()
            .map(|m| DeviceCapabilities {
                device: m.id.clone(),
                kind: m.kind,
                dynamic_egress: m.dynamic_egress,
                interfaces: m.interfaces.clone(),
            })
            .collect()
    }

    pub fn mean_interfaces(&self) -> f64 {
        let total: usize = self.graph.middleboxes.values().map(|m| m.interfaces.len()).sum();
        total as f64 / self.graph.middleboxes.len().max(1) as f64
    }

    /// The edge switch port wired to `ep`, if `ep` is edge-attached.
    pub fn edge_attachment(&self, ep: &Endpoint) -> Option<Endpoint> {
        let other = self.graph.link_at(ep)?.other(ep)?;
        let island = self.graph.island_of_switch(&other.node)?;
        self.edge_islands.contains(&island.id).then(|| other.clone())
    }

    /// The middlebox interface holding `ip`.
    pub fn owner_of(&self, ip: Ipv4Addr) -> Option<Endpoint> {
        self.graph
            .middleboxes
            .values()
            .find_map(|m| m.interfaces.iter().find(|i| i.ip == ip).map(|i| Endpoint::new(&m.id, &i.name)))
    }
}

// ---------------------------------------------------------------------------
// Serialization

pub fn serialize_network_config(net: &NetworkInstance) -> String {
    let mut out = String::from("[middlebox]\n");
    for m in net.graph.middleboxes.values() {
        let _ = write!(out, "{} {}", m.id, m.kind);
        if m.dynamic_egress != (m.kind == MiddleboxKind::LoadBalancer) {
            out.push_str(if m.dynamic_egress { " dynamic" } else { " static" });
        }
        for i in &m.interfaces {
            let _ = write!(out, " {}={}/{}", i.name, i.ip, i.prefix_len);
        }
        let edge: Vec<&str> = m
            .interfaces
            .iter()
            .filter(|i| net.edge_facing.contains(&Endpoint::new(&m.id, &i.name)))
            .map(|i| i.name.as_str())
            .collect();
        if !edge.is_empty() {
            let _ = write!(out, " edge={}", edge.join(","));
        }
        out.push('\n');
    }
    out.push_str("[island]\n");
    for isl in net.graph.islands.values() {
        let ports: Vec<String> = isl.border_ports.iter().map(|p| p.to_string()).collect();
        let _ = write!(out, "{} {} switches={} ports={}", isl.id, isl.subnet, isl.switches.join(","), ports.join(","));
        if net.edge_islands.contains(&isl.id) {
            out.push_str(" edge");
        }
        out.push('\n');
    }
    out.push_str("[link]\n");
    for l in &net.graph.links {
        let _ = writeln!(out, "{} {}", l.a(), l.b());
    }
    for isl in net.graph.islands.values() {
        for l in &isl.internal_links {
            let _ = writeln!(out, "{} {}", l.a(), l.b());
        }
    }
    out.push_str("[route]\n");
    for m in net.graph.middleboxes.values() {
        for r in &m.routes {
            let _ = writeln!(out, "{} {} {} {}", m.id, r.dest, r.out_interface, r.next_hop);
        }
    }
    out.push_str("[policy]\n");
    for p in &net.policies {
        let _ = writeln!(out, "{} -> {} {}", p.src_network, p.dst_network, p.action);
    }
    out
}

// ---------------------------------------------------------------------------
// Parsing

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Middlebox,
    Island,
    Link,
    Route,
    Policy,
}

fn records(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_prefix(line: usize, s: &str) -> Result<Prefix, TopoError> {
    s.parse::<Prefix>().map_err(|e| perr(line, e.to_string()))
}

fn parse_endpoint(line: usize, s: &str) -> Result<Endpoint, TopoError> {
    match s.split_once(':') {
        Some((n, p)) if is_wire_name(n) && is_wire_name(p) => Ok(Endpoint::new(n, p)),
        _ => Err(perr(line, format!("bad endpoint {s:?}"))),
    }
}

fn parse_policy_line(line: usize, rec: &str) -> Result<PolicyRule, TopoError> {
    let toks: Vec<&str> = rec.split_whitespace().collect();
    match toks.as_slice() {
        [src, "->", dst, action] => Ok(PolicyRule {
            src_network: parse_prefix(line, src)?,
            dst_network: parse_prefix(line, dst)?,
            action: action.to_string(),
        }),
        _ => Err(perr(line, "expected `<src> -> <dst> <action>`")),
    }
}

/// Policy file: one `<src> -> <dst> <action>` per line. A leading
/// `[policy]` header is accepted.
pub fn parse_policy_config(text: &str) -> Result<Vec<PolicyRule>, TopoError> {
    records(text).filter(|(_, rec)| *rec != "[policy]").map(|(line, rec)| parse_policy_line(line, rec)).collect()
}

pub fn parse_network_config(text: &str) -> Result<NetworkInstance, TopoError> {
    let mut net = NetworkInstance::default();
    let mut section = None;
    let mut links: Vec<(usize, Endpoint, Endpoint)> = Vec::new();
    let mut routes: Vec<(usize, String, RouteEntry)> = Vec::new();
    let mut switch_island: BTreeMap<String, String> = BTreeMap::new();

    for (line, rec) in records(text) {
        if rec.starts_with('[') {
            section = Some(match rec {
                "[middlebox]" => Section::Middlebox,
                "[island]" => Section::Island,
                "[link]" => Section::Link,
                "[route]" => Section::Route,
                "[policy]" => Section::Policy,
                other => return Err(perr(line, format!("unknown section {other}"))),
            });
            continue;
        }
        let toks: Vec<&str> = rec.split_whitespace().collect();
        match section.ok_or_else(|| perr(line, "record before any section"))? {
            Section::Middlebox => {
                let [id, kind, rest @ ..] = toks.as_slice() else {
                    return Err(perr(line, "expected `<id> <kind> ...`"));
                };
                if !is_wire_name(id) {
                    return Err(perr(line, format!("bad id {id:?}")));
                }
                if net.graph.middleboxes.contains_key(*id) || switch_island.contains_key(*id) {
                    return Err(perr(line, format!("duplicate node {id}")));
                }
                let kind: MiddleboxKind = kind.parse().map_err(|e: String| perr(line, e))?;
                let mut mb = Middlebox::new(*id, kind, Vec::new());
                let mut edge = Vec::new();
                for t in rest {
                    match *t {
                        "dynamic" => mb.dynamic_egress = true,
                        "static" => mb.dynamic_egress = false,
                        t if t.starts_with("edge=") => edge.extend(t["edge=".len()..].split(',').map(str::to_string)),
                        t => {
                            let (name, addr) =
                                t.split_once('=').ok_or_else(|| perr(line, format!("bad token {t:?}")))?;
                            if !is_wire_name(name) || mb.interface(name).is_some() {
                                return Err(perr(line, format!("bad or duplicate interface {name:?}")));
                            }
                            let p = parse_prefix(line, addr)?;
                            mb.interfaces.push(Interface::new(name, p.addr, p.len));
                        }
                    }
                }
                for e in edge {
                    if mb.interface(&e).is_none() {
                        return Err(perr(line, format!("edge flag on unknown interface {e}")));
                    }
                    net.edge_facing.insert(Endpoint::new(*id, e));
                }
                net.graph.middleboxes.insert(id.to_string(), mb);
            }
            Section::Island => {
                let [id, subnet, rest @ ..] = toks.as_slice() else {
                    return Err(perr(line, "expected `<id> <subnet> ...`"));
                };
                if !is_wire_name(id) || net.graph.islands.contains_key(*id) {
                    return Err(perr(line, format!("bad or duplicate island {id:?}")));
                }
                let mut isl = SdnIsland {
                    id: id.to_string(),
                    subnet: parse_prefix(line, subnet)?,
                    switches: Vec::new(),
                    internal_links: Vec::new(),
                    border_ports: Vec::new(),
                };
                for t in rest {
                    if let Some(s) = t.strip_prefix("switches=") {
                        for sw in s.split(',') {
                            if !is_wire_name(sw)
                                || switch_island.contains_key(sw)
                                || net.graph.middleboxes.contains_key(sw)
                            {
                                return Err(perr(line, format!("bad or duplicate switch {sw:?}")));
                            }
                            switch_island.insert(sw.to_string(), id.to_string());
                            isl.switches.push(sw.to_string());
                        }
                    } else if let Some(s) = t.strip_prefix("ports=") {
                        for p in s.split(',').filter(|p| !p.is_empty()) {
                            let ep = parse_endpoint(line, p)?;
                            if !isl.has_switch(&ep.node) {
                                return Err(perr(line, format!("port {p} is not on this island")));
                            }
                            isl.border_ports.push(ep);
                        }
                    } else if *t == "edge" {
                        net.edge_islands.insert(id.to_string());
                    } else {
                        return Err(perr(line, format!("bad token {t:?}")));
                    }
                }
                net.graph.islands.insert(id.to_string(), isl);
            }
            Section::Link => {
                let [a, b] = toks.as_slice() else { return Err(perr(line, "expected two endpoints")) };
                links.push((line, parse_endpoint(line, a)?, parse_endpoint(line, b)?));
            }
            Section::Route => {
                let [dev, prefix, out, hop] = toks.as_slice() else {
                    return Err(perr(line, "expected `<device> <prefix> <out> <next-hop>`"));
                };
                let next_hop = match *hop {
                    "DIRECT" => NextHop::Direct,
                    ip => NextHop::Via(ip.parse().map_err(|_| perr(line, format!("bad next hop {ip:?}")))?),
                };
                let entry = RouteEntry { dest: parse_prefix(line, prefix)?, out_interface: out.to_string(), next_hop };
                routes.push((line, dev.to_string(), entry));
            }
            Section::Policy => net.policies.push(parse_policy_line(line, rec)?),
        }
    }

    for (line, a, b) in links {
        let link = Link::new(a.clone(), b.clone()).map_err(|e| perr(line, e.to_string()))?;
        let mbs = [&a, &b].map(|e| net.graph.middleboxes.get(&e.node).and_then(|m| m.interface(&e.port)));
        match (mbs[0], mbs[1]) {
            (Some(x), Some(y)) => {
                if x.subnet() != y.subnet() {
                    return Err(TopoError::SubnetMismatch {
                        line,
                        msg: format!("{a} is {} but {b} is {}", x.subnet(), y.subnet()),
                    });
                }
            }
            (Some(i), None) | (None, Some(i)) => {
                let (mb_ep, sw_ep) = if mbs[0].is_some() { (&a, &b) } else { (&b, &a) };
                let isl = switch_island
                    .get(&sw_ep.node)
                    .and_then(|id| net.graph.islands.get(id))
                    .ok_or_else(|| perr(line, format!("unknown node {}", sw_ep.node)))?;
                if !isl.border_ports.contains(sw_ep) {
                    return Err(perr(line, format!("{sw_ep} is not a border port")));
                }
                if i.subnet() != isl.subnet.network() {
                    return Err(TopoError::SubnetMismatch {
                        line,
                        msg: format!("{mb_ep} is {} but island {} is {}", i.subnet(), isl.id, isl.subnet),
                    });
                }
            }
            (None, None) => {
                let ia = switch_island.get(&a.node);
                let ib = switch_island.get(&b.node);
                match (ia, ib) {
                    (Some(x), Some(y)) if x == y => {
                        net.graph.islands.get_mut(x).expect("island").internal_links.push(link);
                        continue;
                    }
                    (Some(_), Some(_)) => return Err(perr(line, "switch link spans two islands")),
                    _ => return Err(perr(line, format!("unknown endpoint in {a} {b}"))),
                }
            }
        }
        if net.graph.link_at(&a).is_some() || net.graph.link_at(&b).is_some() {
            return Err(perr(line, "endpoint already linked"));
        }
        net.graph.links.insert(link);
    }

    for (line, dev, entry) in routes {
        let mb = net.graph.middleboxes.get(&dev).ok_or_else(|| perr(line, format!("unknown device {dev}")))?;
        let out = Endpoint::new(&dev, &entry.out_interface);
        if mb.interface(&entry.out_interface).is_none() {
            return Err(TopoError::InconsistentRoute { line, msg: format!("no interface {out}") });
        }
        if let NextHop::Via(ip) = entry.next_hop {
            if !next_hop_reachable(&net, &out, ip) {
                return Err(TopoError::InconsistentRoute {
                    line,
                    msg: format!("{ip} is not reachable over a link from {out}"),
                });
            }
        }
        net.graph.middleboxes.get_mut(&dev).expect("device").routes.push(entry);
    }
    Ok(net)
}

fn next_hop_reachable(net: &NetworkInstance, out: &Endpoint, ip: Ipv4Addr) -> bool {
    let Some(other) = net.graph.link_at(out).and_then(|l| l.other(out)) else { return false };
    if let Some(m) = net.graph.middleboxes.get(&other.node) {
        return m.interface(&other.port).is_some_and(|i| i.ip == ip);
    }
    let Some(isl) = net.graph.island_of_switch(&other.node) else { return false };
    isl.border_ports.iter().any(|p| {
        net.graph
            .link_at(p)
            .and_then(|l| l.other(p))
            .and_then(|e| net.graph.middleboxes.get(&e.node).and_then(|m| m.interface(&e.port)))
            .is_some_and(|i| i.ip == ip)
    })
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    CiscoEnterprise,
    InlineOffline,
    Tree,
    FullMesh,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::CiscoEnterprise, Family::InlineOffline, Family::Tree, Family::FullMesh];

    pub fn as_str(&self) -> &'static str {
        match self {
            Family::CiscoEnterprise => "cisco",
            Family::InlineOffline => "inline-offline",
            Family::Tree => "tree",
            Family::FullMesh => "full-mesh",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown family {s:?} (expected cisco, inline-offline, tree or full-mesh)"))
    }
}

pub const DEFAULT_TREE_FANOUT: usize = 3;

pub fn generate_topology(family: Family, n: usize, seed: u64) -> NetworkInstance {
    assert!(n >= 2, "a topology needs at least two middleboxes");
    let mut b = Builder::new(seed);
    match family {
        Family::CiscoEnterprise => b.cisco(n),
        Family::InlineOffline => b.inline_offline(n),
        Family::Tree => b.tree(n, DEFAULT_TREE_FANOUT),
        Family::FullMesh => b.full_mesh(n),
    }
    b.finish()
}

pub fn generate_tree(n: usize, fanout: usize, seed: u64) -> NetworkInstance {
    assert!(n >= 2 && fanout >= 1);
    let mut b = Builder::new(seed);
    b.tree(n, fanout);
    b.finish()
}

const PLAIN_KINDS: [MiddleboxKind; 5] =
    [MiddleboxKind::Firewall, MiddleboxKind::Ids, MiddleboxKind::Proxy, MiddleboxKind::Vpn, MiddleboxKind::Generic];

struct Builder {
    net: NetworkInstance,
    rng: ChaCha8Rng,
    next_link: u32,
    next_island: u32,
    island_hosts: BTreeMap<String, u32>,
    switch_ports: BTreeMap<String, u32>,
    /// Edge island subnets in creation order, for policy generation.
    edge_subnets: Vec<Prefix>,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Builder {
            net: NetworkInstance::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            next_link: 0,
            next_island: 0,
            island_hosts: BTreeMap::new(),
            switch_ports: BTreeMap::new(),
            edge_subnets: Vec::new(),
        }
    }

    fn mb(&mut self, id: &str, kind: Option<MiddleboxKind>) -> String {
        let kind = kind.unwrap_or_else(|| *PLAIN_KINDS.choose(&mut self.rng).expect("kinds"));
        self.net.graph.middleboxes.insert(id.to_string(), Middlebox::new(id, kind, Vec::new()));
        id.to_string()
    }

    fn add_iface(&mut self, mb: &str, ip: Ipv4Addr, len: u8) -> Endpoint {
        let m = self.net.graph.middleboxes.get_mut(mb).expect("middlebox");
        let name = format!("eth{}", m.interfaces.len());
        m.interfaces.push(Interface::new(&name, ip, len));
        Endpoint::new(mb, name)
    }

    fn link(&mut self, a: &str, b: &str) {
        let base = u32::from(Ipv4Addr::new(10, 0, 0, 0)) + 4 * self.next_link;
        self.next_link += 1;
        let x = self.add_iface(a, Ipv4Addr::from(base + 1), 30);
        let y = self.add_iface(b, Ipv4Addr::from(base + 2), 30);
        self.net.graph.links.insert(Link::new(x, y).expect("distinct endpoints"));
    }

    fn port(&mut self, switch: &str) -> Endpoint {
        let c = self.switch_ports.entry(switch.to_string()).or_insert(0);
        *c += 1;
        Endpoint::new(switch, format!("p{c}"))
    }

    fn island(&mut self, switches: usize, edge: bool) -> String {
        let k = self.next_island;
        self.next_island += 1;
        let base = u32::from(Ipv4Addr::new(172, 16, 0, 0)) + 256 * k;
        let id = format!("isl{k}");
        let names: Vec<String> = (0..switches).map(|j| format!("isl{k}s{j}")).collect();
        let mut internal = Vec::new();
        for w in names.windows(2) {
            let (p, q) = (self.port(&w[0]), self.port(&w[1]));
            internal.push(Link::new(p, q).expect("distinct switches"));
        }
        let subnet = Prefix::new(Ipv4Addr::from(base), 24).expect("valid prefix");
        self.net.graph.islands.insert(
            id.clone(),
            SdnIsland { id: id.clone(), subnet, switches: names, internal_links: internal, border_ports: Vec::new() },
        );
        if edge {
            self.net.edge_islands.insert(id.clone());
            self.edge_subnets.push(subnet);
        }
        id
    }

    fn attach(&mut self, mb: &str, island: &str, switch_idx: usize) -> Endpoint {
        let isl = &self.net.graph.islands[island];
        let switch = isl.switches[switch_idx % isl.switches.len()].clone();
        let base = u32::from(isl.subnet.addr);
        let host = self.island_hosts.entry(island.to_string()).or_insert(0);
        *host += 1;
        let ip = Ipv4Addr::from(base + *host);
        let ep = self.add_iface(mb, ip, 24);
        let port = self.port(&switch);
        self.net.graph.islands.get_mut(island).expect("island").border_ports.push(port.clone());
        self.net.graph.links.insert(Link::new(ep.clone(), port).expect("distinct endpoints"));
        ep
    }

    /// A single-switch edge island with `mb` as its only middlebox.
    fn edge_island(&mut self, mb: &str) {
        let isl = self.island(1, true);
        let ep = self.attach(mb, &isl, 0);
        self.net.edge_facing.insert(ep);
    }

    fn full_mesh(&mut self, n: usize) {
        let ids: Vec<String> = (0..n).map(|i| self.mb(&format!("mb{i}"), None)).collect();
        for i in 0..n {
            for j in i + 1..n {
                self.link(&ids[i], &ids[j]);
            }
        }
    }

    fn tree(&mut self, n: usize, fanout: usize) {
        let ids: Vec<String> = (0..n).map(|i| self.mb(&format!("mb{i}"), None)).collect();
        self.edge_island(&ids[0]);
        for i in 1..n {
            self.link(&ids[(i - 1) / fanout], &ids[i]);
        }
        for (i, id) in ids.iter().enumerate().skip(1) {
            if i * fanout + 1 >= n {
                self.edge_island(id);
            }
        }
    }

    /// Inline chain whose head attaches to island `from`. Returns the head's
    /// island interface and the tail device, which the caller attaches onward.
    fn chain(&mut self, prefix: &str, start: usize, len: usize, from: &str, switch_idx: usize) -> (Endpoint, String) {
        let ids: Vec<String> = (0..len).map(|i| self.mb(&format!("{prefix}{}", start + i), None)).collect();
        let head = self.attach(&ids[0], from, switch_idx);
        for w in ids.windows(2) {
            self.link(&w[0], &w[1]);
        }
        (head, ids[len - 1].clone())
    }

    /// Two cores on a core island with WAN uplinks, distribution tier
    /// hanging off the cores (first one a dual-homed load balancer, odd
    /// ones cross-linked to their predecessor). Each distribution MB owns
    /// an island with one offline MB, and access chains of one or two
    /// inline MBs run from it down to edge switches.
    fn cisco(&mut self, n: usize) {
        let dists = n.div_ceil(5).min(n - 2);
        let cores = [self.mb("core0", None), self.mb("core1", None)];
        let core_isl = self.island(2, false);
        for (k, c) in cores.iter().enumerate() {
            self.attach(c, &core_isl, k);
            self.edge_island(c);
        }
        let mut dist_ids: Vec<String> = Vec::new();
        let mut dist_isl: Vec<String> = Vec::new();
        for k in 0..dists {
            let kind = (k == 0).then_some(MiddleboxKind::LoadBalancer);
            let d = self.mb(&format!("dist{k}"), kind);
            self.link(&cores[k % 2], &d);
            if k == 0 {
                self.link(&cores[1], &d);
            }
            if k % 2 == 1 {
                self.link(&dist_ids[k - 1], &d);
            }
            let isl = self.island(2, false);
            self.attach(&d, &isl, 0);
            dist_ids.push(d);
            dist_isl.push(isl);
        }
        let mut left = n - 2 - dists;
        for (k, isl) in dist_isl.iter().take(left).enumerate() {
            let m = self.mb(&format!("off{k}"), None);
            self.attach(&m, isl, 1);
            left -= 1;
        }
        let mut access = 0;
        let mut turn = 0;
        while left > 0 {
            let k = turn % dists;
            let len = self.rng.gen_range(1..=2).min(left);
            let (_, tail) = self.chain("acc", access, len, &dist_isl[k].clone(), turn / dists);
            self.edge_island(&tail);
            access += len;
            left -= len;
            turn += 1;
        }
    }

    /// Ingress edge switch, then inline chains of two or three alternating
    /// with islands carrying three or four offline MBs, ending at the egress
    /// edge switch.
    fn inline_offline(&mut self, n: usize) {
        let ingress = self.island(1, true);
        let mut prev = ingress;
        let mut left = n;
        let mut inline = 0;
        let mut offline = 0;
        loop {
            let len = self.rng.gen_range(2..=3);
            let hung = self.rng.gen_range(3..=4);
            let len = if left > len + hung { len } else { left };
            let (head, tail) = self.chain("in", inline, len, &prev.clone(), 0);
            if inline == 0 {
                self.net.edge_facing.insert(head);
            }
            inline += len;
            left -= len;
            if left == 0 {
                let egress = self.island(1, true);
                let ep = self.attach(&tail, &egress, 0);
                self.net.edge_facing.insert(ep);
                break;
            }
            let isl = self.island(2, false);
            self.attach(&tail, &isl, 0);
            for s in 0..hung {
                let m = self.mb(&format!("off{offline}"), None);
                offline += 1;
                self.attach(&m, &isl, s);
            }
            left -= hung;
            prev = isl;
        }
    }

    /// Client-to-server policies between consecutive edge networks.
    fn policies(&mut self) {
        let e = &self.edge_subnets;
        for k in (0..e.len()).step_by(2) {
            let dst = if k + 1 < e.len() {
                e[k + 1]
            } else if e.len() > 1 {
                e[1]
            } else {
                continue;
            };
            self.net.policies.push(PolicyRule { src_network: e[k], dst_network: dst, action: "allow".into() });
        }
    }

    fn finish(mut self) -> NetworkInstance {
        self.policies();
        install_routes(&mut self.net.graph);
        self.net
    }
}

/// One-hop neighbours reachable from a device: (egress iface, next-hop ip,
/// neighbour index). Island members count as neighbours.
fn neighbours(g: &TopologyGraph, ids: &BTreeMap<&str, usize>) -> Vec<Vec<(String, Ipv4Addr, usize)>> {
    let mut island_members: BTreeMap<&str, Vec<(usize, &Interface)>> = BTreeMap::new();
    for (idx, m) in g.middleboxes.values().enumerate() {
        for i in &m.interfaces {
            let ep = Endpoint::new(&m.id, &i.name);
            if let Some(other) = g.link_at(&ep).and_then(|l| l.other(&ep)) {
                if let Some(isl) = g.island_of_switch(&other.node) {
                    island_members.entry(isl.id.as_str()).or_default().push((idx, i));
                }
            }
        }
    }
    g.middleboxes
        .values()
        .enumerate()
        .map(|(idx, m)| {
            let mut out = Vec::new();
            for i in &m.interfaces {
                let ep = Endpoint::new(&m.id, &i.name);
                let Some(other) = g.link_at(&ep).and_then(|l| l.other(&ep)) else { continue };
                if let Some(peer) = g.middleboxes.get(&other.node) {
                    let ip = peer.interface(&other.port).expect("linked interface").ip;
                    out.push((i.name.clone(), ip, ids[peer.id.as_str()]));
                } else if let Some(isl) = g.island_of_switch(&other.node) {
                    for (peer, pi) in &island_members[isl.id.as_str()] {
                        if *peer != idx {
                            out.push((i.name.clone(), pi.ip, *peer));
                        }
                    }
                }
            }
            out
        })
        .collect()
}

/// Shortest-path host routes toward every remote interface address,
/// compressed so the most common next hop becomes the default route. Only
/// load balancers keep equal-cost alternatives.
fn install_routes(g: &mut TopologyGraph) {
    let ids: BTreeMap<&str, usize> = g.middleboxes.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let n = ids.len();
    let adj = neighbours(g, &ids);
    let mut dist = vec![vec![u32::MAX; n]; n];
    for (s, row) in dist.iter_mut().enumerate() {
        row[s] = 0;
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &(_, _, v) in &adj[u] {
                if row[v] == u32::MAX {
                    row[v] = row[u] + 1;
                    q.push_back(v);
                }
            }
        }
    }
    let boxes: Vec<&Middlebox> = g.middleboxes.values().collect();
    let mut tables = Vec::with_capacity(n);
    for (s, mb) in boxes.iter().enumerate() {
        let connected: Vec<Prefix> = mb.interfaces.iter().map(|i| i.subnet()).collect();
        let mut per_dest: Vec<(Ipv4Addr, Vec<(String, Ipv4Addr)>)> = Vec::new();
        for (d, peer) in boxes.iter().enumerate() {
            if d == s || dist[s][d] == u32::MAX {
                continue;
            }
            let mut hops: Vec<(String, Ipv4Addr)> = Vec::new();
            for (out, ip, v) in &adj[s] {
                if dist[*v][d] != u32::MAX && dist[*v][d] + 1 == dist[s][d] && !hops.iter().any(|h| &h.0 == out) {
                    hops.push((out.clone(), *ip));
                }
            }
            if !mb.dynamic_egress {
                hops.truncate(1);
            }
            for i in &peer.interfaces {
                if !connected.iter().any(|c| c.contains(i.ip)) {
                    per_dest.push((i.ip, hops.clone()));
                }
            }
        }
        let mut counts: Vec<(&Vec<(String, Ipv4Addr)>, usize)> = Vec::new();
        for (_, h) in &per_dest {
            match counts.iter_mut().find(|(k, _)| *k == h) {
                Some(c) => c.1 += 1,
                None => counts.push((h, 1)),
            }
        }
        let default = counts.iter().fold(None::<(&Vec<(String, Ipv4Addr)>, usize)>, |best, &(k, c)| match best {
            Some((_, bc)) if bc >= c => best,
            _ => Some((k, c)),
        });
        let mut routes = Vec::new();
        for (ip, hops) in &per_dest {
            if default.is_some_and(|(d, _)| d == hops) {
                continue;
            }
            for (out, nh) in hops {
                routes.push(RouteEntry {
                    dest: Prefix::new(*ip, 32).expect("host prefix"),
                    out_interface: out.clone(),
                    next_hop: NextHop::Via(*nh),
                });
            }
        }
        if let Some((hops, _)) = default {
            for (out, nh) in hops {
                routes.push(RouteEntry {
                    dest: Prefix::new(Ipv4Addr::UNSPECIFIED, 0).expect("default prefix"),
                    out_interface: out.clone(),
                    next_hop: NextHop::Via(*nh),
                });
            }
        }
        tables.push(routes);
    }
    for (m, routes) in g.middleboxes.values_mut().zip(tables) {
        m.routes = routes;
    }
}
