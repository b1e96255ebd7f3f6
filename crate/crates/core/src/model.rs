//! Network graph shared by the simulator (ground truth) and the controller
//! (discovered view).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("no route to {0}")]
    NoRoute(Ipv4Addr),
    #[error("unknown link endpoint {0}")]
    UnknownEndpoint(Endpoint),
    #[error("link endpoints must differ: {0}")]
    SelfLink(Endpoint),
    #[error("invalid prefix {0:?}")]
    BadPrefix(String),
}

/// IPv4 prefix. The address keeps its host bits so it can double as an
/// interface address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Prefix {
    pub addr: Ipv4Addr,
    pub len: u8,
}

impl Prefix {
    pub fn new(addr: Ipv4Addr, len: u8) -> Result<Self, ModelError> {
        if len > 32 {
            return Err(ModelError::BadPrefix(format!("{addr}/{len}")));
        }
        Ok(Prefix { addr, len })
    }

    pub fn mask(&self) -> u32 {
        if self.len == 0 {
            0
        } else {
            u32::MAX << (32 - self.len as u32)
        }
    }

    /// The same prefix with host bits cleared.
    pub fn network(&self) -> Prefix {
        Prefix { addr: Ipv4Addr::from(u32::from(self.addr) & self.mask()), len: self.len }
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        (u32::from(ip) & self.mask()) == (u32::from(self.addr) & self.mask())
    }

    pub fn contains_prefix(&self, other: &Prefix) -> bool {
        other.len >= self.len && self.contains(other.addr)
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.addr, self.len)
    }
}

impl FromStr for Prefix {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ModelError::BadPrefix(s.to_string());
        let (ip, len) = s.split_once('/').ok_or_else(bad)?;
        let addr: Ipv4Addr = ip.parse().map_err(|_| bad())?;
        if len.is_empty() || !len.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let len: u8 = len.parse().map_err(|_| bad())?;
        Prefix::new(addr, len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interface {
    pub name: String,
    pub ip: Ipv4Addr,
    pub prefix_len: u8,
}

impl Interface {
    pub fn new(name: impl Into<String>, ip: Ipv4Addr, prefix_len: u8) -> Self {
        Interface { name: name.into(), ip, prefix_len }
    }

    pub fn subnet(&self) -> Prefix {
        Prefix { addr: self.ip, len: self.prefix_len }.network()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MiddleboxKind {
    Firewall,
    Ids,
    Proxy,
    Vpn,
    LoadBalancer,
    Generic,
}

impl MiddleboxKind {
    pub const ALL: [MiddleboxKind; 6] = [
        MiddleboxKind::Firewall,
        MiddleboxKind::Ids,
        MiddleboxKind::Proxy,
        MiddleboxKind::Vpn,
        MiddleboxKind::LoadBalancer,
        MiddleboxKind::Generic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MiddleboxKind::Firewall => "firewall",
            MiddleboxKind::Ids => "ids",
            MiddleboxKind::Proxy => "proxy",
            MiddleboxKind::Vpn => "vpn",
            MiddleboxKind::LoadBalancer => "load_balancer",
            MiddleboxKind::Generic => "generic",
        }
    }
}

impl fmt::Display for MiddleboxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MiddleboxKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MiddleboxKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown middlebox kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NextHop {
    Direct,
    Via(Ipv4Addr),
}

impl fmt::Display for NextHop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NextHop::Direct => f.write_str("DIRECT"),
            NextHop::Via(ip) => write!(f, "{ip}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteEntry {
    pub dest: Prefix,
    pub out_interface: String,
    pub next_hop: NextHop,
}

/// Result of a route lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteMatch<'a> {
    pub out_interface: &'a str,
    pub next_hop: NextHop,
    pub prefix_len: u8,
}

impl RouteMatch<'_> {
    /// Address the frame is handed to on the egress link.
    pub fn link_target(&self, dest: Ipv4Addr) -> Ipv4Addr {
        match self.next_hop {
            NextHop::Direct => dest,
            NextHop::Via(ip) => ip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Middlebox {
    pub id: String,
    pub kind: MiddleboxKind,
    pub interfaces: Vec<Interface>,
    pub routes: Vec<RouteEntry>,
    pub dynamic_egress: bool,
}

impl Middlebox {
    pub fn new(id: impl Into<String>, kind: MiddleboxKind, interfaces: Vec<Interface>) -> Self {
        Middlebox {
            id: id.into(),
            kind,
            dynamic_egress: kind == MiddleboxKind::LoadBalancer,
            interfaces,
            routes: Vec::new(),
        }
    }

    pub fn interface(&self, name: &str) -> Option<&Interface> {
        self.interfaces.iter().find(|i| i.name == name)
    }

    pub fn owns_ip(&self, ip: Ipv4Addr) -> bool {
        self.interfaces.iter().any(|i| i.ip == ip)
    }

    /// Longest-prefix match over connected subnets and configured routes.
    /// Equal-length matches resolve to the first one declared.
    pub fn lookup_route(&self, dest: Ipv4Addr) -> Result<RouteMatch<'_>, ModelError> {
        let mut best: Option<RouteMatch<'_>> = None;
        for (prefix, m) in self.matching(dest) {
            if best.is_none_or(|b| prefix.len > b.prefix_len) {
                best = Some(m);
            }
        }
        best.ok_or(ModelError::NoRoute(dest))
    }

    /// Every match at the longest matching prefix length, deduplicated by
    /// egress interface. More than one element means equal-cost egress.
    pub fn equal_cost_routes(&self, dest: Ipv4Addr) -> Vec<RouteMatch<'_>> {
        let mut best_len = None;
        let mut out: Vec<RouteMatch<'_>> = Vec::new();
        for (prefix, m) in self.matching(dest) {
            match best_len {
                Some(l) if prefix.len < l => continue,
                Some(l) if prefix.len == l => {}
                _ => {
                    best_len = Some(prefix.len);
                    out.clear();
                }
            }
            if !out.iter().any(|o| o.out_interface == m.out_interface) {
                out.push(m);
            }
        }
        out
    }

    /// Connected subnets first, then configured routes, each in declaration
    /// order.
    fn matching(&self, dest: Ipv4Addr) -> impl Iterator<Item = (Prefix, RouteMatch<'_>)> {
        let connected = self.interfaces.iter().map(|i| (i.subnet(), i.name.as_str(), NextHop::Direct));
        let configured = self.routes.iter().map(|r| (r.dest, r.out_interface.as_str(), r.next_hop));
        connected
            .chain(configured)
            .filter(move |(p, _, _)| p.contains(dest))
            .map(|(p, out, hop)| (p, RouteMatch { out_interface: out, next_hop: hop, prefix_len: p.len }))
    }
}

/// One side of a link: a middlebox interface or a switch port.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Endpoint {
    pub node: String,
    pub port: String,
}

impl Endpoint {
    pub fn new(node: impl Into<String>, port: impl Into<String>) -> Self {
        Endpoint { node: node.into(), port: port.into() }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.port)
    }
}

/// Undirected link; endpoints are stored in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    a: Endpoint,
    b: Endpoint,
}

impl Link {
    pub fn new(x: Endpoint, y: Endpoint) -> Result<Self, ModelError> {
        if x == y {
            return Err(ModelError::SelfLink(x));
        }
        Ok(if x <= y { Link { a: x, b: y } } else { Link { a: y, b: x } })
    }

    pub fn a(&self) -> &Endpoint {
        &self.a
    }

    pub fn b(&self) -> &Endpoint {
        &self.b
    }

    pub fn endpoints(&self) -> [&Endpoint; 2] {
        [&self.a, &self.b]
    }

    pub fn touches(&self, ep: &Endpoint) -> bool {
        &self.a == ep || &self.b == ep
    }

    pub fn other(&self, ep: &Endpoint) -> Option<&Endpoint> {
        if &self.a == ep {
            Some(&self.b)
        } else if &self.b == ep {
            Some(&self.a)
        } else {
            None
        }
    }
}

impl fmt::Display for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.a, self.b)
    }
}

/// A contiguous region of SDN switches whose internal wiring the SDN
/// controller already knows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SdnIsland {
    pub id: String,
    pub subnet: Prefix,
    pub switches: Vec<String>,
    pub internal_links: Vec<Link>,
    /// Ports that can face middlebox interfaces.
    pub border_ports: Vec<Endpoint>,
}

impl SdnIsland {
    pub fn has_switch(&self, node: &str) -> bool {
        self.switches.iter().any(|s| s == node)
    }

    pub fn has_port(&self, ep: &Endpoint) -> bool {
        self.border_ports.contains(ep) || self.internal_links.iter().any(|l| l.touches(ep))
    }

    /// Switch hops from `from` to `to` over internal links (BFS, ties broken
    /// by sorted link order).
    pub fn switch_path(&self, from: &str, to: &str) -> Option<Vec<String>> {
        let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = std::collections::VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(cur) = queue.pop_front() {
            if cur == to {
                let mut path = vec![to.to_string()];
                let mut at = to;
                while let Some(p) = prev.get(at) {
                    path.push(p.to_string());
                    at = p;
                }
                path.reverse();
                return Some(path);
            }
            for l in &self.internal_links {
                for (x, y) in [(&l.a, &l.b), (&l.b, &l.a)] {
                    if x.node == cur && seen.insert(y.node.as_str()) {
                        prev.insert(y.node.as_str(), cur);
                        queue.push_back(y.node.as_str());
                    }
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TopologyGraph {
    pub middleboxes: BTreeMap<String, Middlebox>,
    pub islands: BTreeMap<String, SdnIsland>,
    pub links: BTreeSet<Link>,
}

impl TopologyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn island_of_switch(&self, node: &str) -> Option<&SdnIsland> {
        self.islands.values().find(|i| i.has_switch(node))
    }

    pub fn has_endpoint(&self, ep: &Endpoint) -> bool {
        if let Some(mb) = self.middleboxes.get(&ep.node) {
            return mb.interface(&ep.port).is_some();
        }
        self.islands.values().any(|i| i.has_switch(&ep.node) && i.has_port(ep))
    }

    /// Adds an undirected link. Returns `true` when the link is new.
    pub fn insert_link(&mut self, link: Link) -> Result<bool, ModelError> {
        for ep in link.endpoints() {
            if !self.has_endpoint(ep) {
                return Err(ModelError::UnknownEndpoint(ep.clone()));
            }
        }
        Ok(self.links.insert(link))
    }

    pub fn node_ids(&self) -> BTreeSet<String> {
        let mut ids: BTreeSet<String> = self.middleboxes.keys().cloned().collect();
        for isl in self.islands.values() {
            ids.extend(isl.switches.iter().cloned());
        }
        ids
    }

    pub fn link_at(&self, ep: &Endpoint) -> Option<&Link> {
        self.links.iter().find(|l| l.touches(ep))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GraphDiff {
    /// In the reference but not discovered.
    pub missing_links: BTreeSet<Link>,
    /// Discovered but absent from the reference.
    pub extra_links: BTreeSet<Link>,
    pub missing_nodes: BTreeSet<String>,
}

impl GraphDiff {
    pub fn is_empty(&self) -> bool {
        self.missing_links.is_empty() && self.extra_links.is_empty() && self.missing_nodes.is_empty()
    }
}

pub fn diff_graphs(discovered: &TopologyGraph, reference: &TopologyGraph) -> GraphDiff {
    let have = discovered.node_ids();
    GraphDiff {
        missing_links: reference.links.difference(&discovered.links).cloned().collect(),
        extra_links: discovered.links.difference(&reference.links).cloned().collect(),
        missing_nodes: reference.node_ids().into_iter().filter(|n| !have.contains(n)).collect(),
    }
}
