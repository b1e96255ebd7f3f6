//! Per-middlebox agent: originates, digests and forwards probes.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crypto_box::PublicKey;
use rand::{CryptoRng, Rng, RngCore};
use thiserror::Error;

use crate::messages::{DeviceStatus, Heartbeat, OutInterfaceUpdate, ProbeInit, ProbeUpdate};
use crate::model::{Middlebox, ModelError};
use crate::probe::{
    next_ttl, OutInterface, Payload, PayloadEntry, ProbeError, ProbeFlags, ProbeHeader, ProbeKind, ProbeMessage,
    ProbePairId, TtlOutcome,
};
use crate::security::{seal_payload, AuthenticatedHeaderFields};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("no interface of {0} is reachable")]
    NoRouteToDestination(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error("expected a {expected:?} probe")]
    WrongProbeKind { expected: ProbeKind },
    #[error("header security requested but no token for {0}")]
    MissingToken(Ipv4Addr),
    #[error("{device} has no steering rule for path {path_id}")]
    PathBroken { device: String, path_id: u32 },
    #[error("unknown interface {0}")]
    UnknownInterface(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EgressMode {
    #[default]
    RoutePredict,
    StaticSteer,
}

/// Transport-port steering rule for one path id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathRule {
    pub out_interface: String,
    pub next_hop: Ipv4Addr,
}

/// What the agent wrote in the payload versus where the probe really went.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressDecision {
    pub predicted: OutInterface,
    pub actual: String,
    /// Address whose owner receives the probe on the actual egress.
    pub link_target: Ipv4Addr,
    pub correction_needed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EgressRecord {
    pub pair: ProbePairId,
    pub ttl: u32,
    pub predicted_out: OutInterface,
    pub actual_out: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Forwarding {
    pub probe: ProbeMessage,
    pub egress: String,
    pub link_target: Ipv4Addr,
    pub correction: Option<OutInterfaceUpdate>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Origination {
    pub forward: Forwarding,
    pub report: Option<ProbeUpdate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    TtlExpired,
    UnresolvableToken(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    UpCallAndForward { report: ProbeUpdate, forward: Forwarding },
    AppendAndForward { forward: Forwarding },
    TerminalUpCall { report: ProbeUpdate },
    Drop { reason: DropReason },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PathAction {
    Forward(Forwarding),
    PathOk(ProbeUpdate),
    Drop,
}

/// Controller round-trip used when probe headers carry tokens.
pub trait TokenResolver {
    fn resolve_probe_id(&mut self, device: &str, token: u64) -> Option<(Ipv4Addr, Ipv4Addr)>;
}

#[derive(Debug, Clone)]
pub struct AgentState {
    pub device: Middlebox,
    pub controller_pub: PublicKey,
    pub port_routing_rules: BTreeMap<u32, PathRule>,
    pub security_policy: ProbeFlags,
    pub ttl_max: u32,
    pub egress_mode: EgressMode,
    pub egress_log: Vec<EgressRecord>,
}

impl AgentState {
    pub fn new(device: Middlebox, controller_pub: PublicKey, ttl_max: u32) -> Self {
        AgentState {
            device,
            controller_pub,
            port_routing_rules: BTreeMap::new(),
            security_policy: ProbeFlags::default(),
            ttl_max,
            egress_mode: EgressMode::RoutePredict,
            egress_log: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.device.id
    }

    pub fn install_path_rule(
        &mut self,
        path_id: u32,
        out_interface: &str,
        next_hop: Ipv4Addr,
    ) -> Result<(), AgentError> {
        if self.device.interface(out_interface).is_none() {
            return Err(AgentError::UnknownInterface(out_interface.to_string()));
        }
        self.port_routing_rules.insert(path_id, PathRule { out_interface: out_interface.to_string(), next_hop });
        Ok(())
    }

    pub fn remove_path_rule(&mut self, path_id: u32) -> Option<PathRule> {
        self.port_routing_rules.remove(&path_id)
    }

    /// Pinned egress straight from the route table.
    fn pinned_egress(&self, dest: Ipv4Addr) -> Result<EgressDecision, AgentError> {
        let m = self.device.lookup_route(dest)?;
        Ok(EgressDecision {
            predicted: OutInterface::Named(m.out_interface.to_string()),
            actual: m.out_interface.to_string(),
            link_target: m.link_target(dest),
            correction_needed: false,
        })
    }

    /// Dynamic-egress devices under route prediction cannot know their egress
    /// before the packet leaves, so they write PENDING and always correct.
    pub fn compute_output_interface<R: Rng>(
        &self,
        dest: Ipv4Addr,
        mode: EgressMode,
        rng: &mut R,
    ) -> Result<EgressDecision, AgentError> {
        if mode == EgressMode::StaticSteer || !self.device.dynamic_egress {
            return self.pinned_egress(dest);
        }
        let choices = self.device.equal_cost_routes(dest);
        if choices.is_empty() {
            return Err(ModelError::NoRoute(dest).into());
        }
        let pick = &choices[rng.gen_range(0..choices.len())];
        Ok(EgressDecision {
            predicted: OutInterface::Pending,
            actual: pick.out_interface.to_string(),
            link_target: pick.link_target(dest),
            correction_needed: true,
        })
    }

    fn seal_entry<R: RngCore + CryptoRng>(
        &self,
        entry: &PayloadEntry,
        header: &ProbeHeader,
        rng: &mut R,
    ) -> crate::security::SealedPayload {
        let hdr = AuthenticatedHeaderFields::from_header(header);
        seal_payload(entry.encode_line().as_bytes(), &hdr, &self.controller_pub, rng)
    }

    /// Payload for the outgoing probe and the matching controller report.
    fn hop_payloads<R: RngCore + CryptoRng>(
        &self,
        header: &ProbeHeader,
        prior: &Payload,
        entry: PayloadEntry,
        rng: &mut R,
    ) -> Result<(Payload, Payload), AgentError> {
        let flags = header.flags;
        let own = if flags.payload_sec {
            Payload::Sealed(vec![self.seal_entry(&entry, header, rng)])
        } else {
            Payload::Entries(vec![entry])
        };
        if !flags.payload_append {
            return Ok((own.clone(), own));
        }
        let combined = match (prior.clone(), own) {
            (Payload::Entries(mut a), Payload::Entries(b)) => {
                a.extend(b);
                Payload::Entries(a)
            }
            (Payload::Sealed(mut a), Payload::Sealed(b)) => {
                a.extend(b);
                Payload::Sealed(a)
            }
            (Payload::Entries(a), own) if a.is_empty() => own,
            (Payload::Sealed(a), own) if a.is_empty() => own,
            _ => return Err(ProbeError::SealedPayload.into()),
        };
        Ok((combined.clone(), combined))
    }

    fn report(&self, header: &ProbeHeader, payload: Payload) -> ProbeUpdate {
        ProbeUpdate {
            device: self.device.id.clone(),
            pair: header.pair,
            ttl: header.probe_ttl,
            path_id: header.path_id,
            flags: header.flags,
            payload,
        }
    }

    pub fn handle_probe_init<R: RngCore + CryptoRng>(
        &self,
        cmd: &ProbeInit,
        crypto_rng: &mut R,
    ) -> Result<Vec<Origination>, AgentError> {
        let mut used_egress: Vec<String> = Vec::new();
        let mut out = Vec::new();
        for target in &cmd.targets {
            let Ok(decision) = self.pinned_egress(target.ip) else { continue };
            if used_egress.contains(&decision.actual) {
                continue;
            }
            let src_ip = self.device.interface(&decision.actual).map(|i| i.ip).expect("route out interface exists");
            let pair = if cmd.flags.header_sec {
                ProbePairId::Token(target.token.ok_or(AgentError::MissingToken(target.ip))?)
            } else {
                ProbePairId::Clear { src: src_ip, dst: target.ip }
            };
            let header = ProbeHeader { probe_ttl: 0, path_id: 0, payload_length: 0, flags: cmd.flags, pair };
            let entry = PayloadEntry::source(&self.device.id, &decision.actual);
            let (payload, report) = self.hop_payloads(&header, &Payload::Entries(Vec::new()), entry, crypto_rng)?;
            used_egress.push(decision.actual.clone());
            out.push(Origination {
                forward: Forwarding {
                    probe: ProbeMessage::new(header.clone(), payload),
                    egress: decision.actual,
                    link_target: decision.link_target,
                    correction: None,
                },
                report: (!cmd.flags.payload_append).then(|| self.report(&header, report)),
            });
        }
        if out.is_empty() {
            return Err(AgentError::NoRouteToDestination(cmd.dest_device.clone()));
        }
        Ok(out)
    }

    fn probe_destination(&self, header: &ProbeHeader, resolver: &mut dyn TokenResolver) -> Result<Ipv4Addr, u64> {
        match header.pair {
            ProbePairId::Clear { dst, .. } => Ok(dst),
            ProbePairId::Token(t) => resolver.resolve_probe_id(&self.device.id, t).map(|(_, dst)| dst).ok_or(t),
        }
    }

    pub fn handle_incoming_probe<E: Rng, C: RngCore + CryptoRng>(
        &mut self,
        msg: &ProbeMessage,
        in_interface: &str,
        resolver: &mut dyn TokenResolver,
        egress_rng: &mut E,
        crypto_rng: &mut C,
    ) -> Result<Action, AgentError> {
        if msg.header.kind() != ProbeKind::Discovery {
            return Err(AgentError::WrongProbeKind { expected: ProbeKind::Discovery });
        }
        let ttl = match next_ttl(msg.header.probe_ttl, self.ttl_max) {
            TtlOutcome::Forward(t) => t,
            TtlOutcome::Discard => return Ok(Action::Drop { reason: DropReason::TtlExpired }),
        };
        let dest = match self.probe_destination(&msg.header, resolver) {
            Ok(d) => d,
            Err(token) => return Ok(Action::Drop { reason: DropReason::UnresolvableToken(token) }),
        };
        let mut header = msg.header.clone();
        header.probe_ttl = ttl;

        if self.device.owns_ip(dest) {
            let entry = PayloadEntry::terminal(&self.device.id, in_interface);
            let (_, report) = self.hop_payloads(&header, &msg.payload, entry, crypto_rng)?;
            return Ok(Action::TerminalUpCall { report: self.report(&header, report) });
        }

        let decision = self.compute_output_interface(dest, self.egress_mode, egress_rng)?;
        let entry = PayloadEntry::transit(&self.device.id, in_interface, decision.predicted.clone());
        let (payload, report) = self.hop_payloads(&header, &msg.payload, entry, crypto_rng)?;
        let correction = decision.correction_needed.then(|| OutInterfaceUpdate {
            device: self.device.id.clone(),
            pair: header.pair,
            ttl,
            out_interface: decision.actual.clone(),
        });
        self.egress_log.push(EgressRecord {
            pair: header.pair,
            ttl,
            predicted_out: decision.predicted.clone(),
            actual_out: decision.actual.clone(),
        });
        let forward = Forwarding {
            probe: ProbeMessage::new(header.clone(), payload),
            egress: decision.actual,
            link_target: decision.link_target,
            correction,
        };
        if header.flags.payload_append {
            Ok(Action::AppendAndForward { forward })
        } else {
            Ok(Action::UpCallAndForward { report: self.report(&header, report), forward })
        }
    }

    /// Originates a path-checker probe toward `terminal_ip`.
    pub fn start_path_check(&self, path_id: u32, terminal_ip: Ipv4Addr) -> Result<Forwarding, AgentError> {
        let rule = self.path_rule(path_id)?;
        let src = self.device.interface(&rule.out_interface).map(|i| i.ip).expect("rule interface exists");
        let header = ProbeHeader {
            probe_ttl: 0,
            path_id,
            payload_length: 0,
            flags: ProbeFlags { payload_append: true, header_sec: false, payload_sec: false },
            pair: ProbePairId::Clear { src, dst: terminal_ip },
        };
        let payload = Payload::Entries(vec![PayloadEntry::source(&self.device.id, &rule.out_interface)]);
        Ok(Forwarding {
            probe: ProbeMessage::new(header, payload),
            egress: rule.out_interface.clone(),
            link_target: rule.next_hop,
            correction: None,
        })
    }

    fn path_rule(&self, path_id: u32) -> Result<&PathRule, AgentError> {
        self.port_routing_rules
            .get(&path_id)
            .ok_or_else(|| AgentError::PathBroken { device: self.device.id.clone(), path_id })
    }

    pub fn handle_path_checker(&self, msg: &ProbeMessage, in_interface: &str) -> Result<PathAction, AgentError> {
        if msg.header.kind() != ProbeKind::PathChecker {
            return Err(AgentError::WrongProbeKind { expected: ProbeKind::PathChecker });
        }
        let ttl = match next_ttl(msg.header.probe_ttl, self.ttl_max) {
            TtlOutcome::Forward(t) => t,
            TtlOutcome::Discard => return Ok(PathAction::Drop),
        };
        let mut header = msg.header.clone();
        header.probe_ttl = ttl;
        let mut trace = msg.entries().ok_or(ProbeError::SealedPayload)?.to_vec();
        let terminal = header.clear_destination().is_some_and(|d| self.device.owns_ip(d));
        if terminal {
            trace.push(PayloadEntry::terminal(&self.device.id, in_interface));
            return Ok(PathAction::PathOk(self.report(&header, Payload::Entries(trace))));
        }
        let rule = self.path_rule(header.path_id)?;
        trace.push(PayloadEntry::transit(
            &self.device.id,
            in_interface,
            OutInterface::Named(rule.out_interface.clone()),
        ));
        Ok(PathAction::Forward(Forwarding {
            probe: ProbeMessage::new(header, Payload::Entries(trace)),
            egress: rule.out_interface.clone(),
            link_target: rule.next_hop,
            correction: None,
        }))
    }

    pub fn heartbeat_tick(&self, now: u64) -> Heartbeat {
        Heartbeat { device: self.device.id.clone(), status: DeviceStatus::Up, at: now }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messages::ProbeTarget;
    use crate::model::{Interface, MiddleboxKind, NextHop, Prefix, RouteEntry};
    use crate::security::{open_payload, ControllerKeyPair};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn route(dest: &str, out: &str, via: &str) -> RouteEntry {
        RouteEntry { dest: dest.parse::<Prefix>().unwrap(), out_interface: out.into(), next_hop: NextHop::Via(ip(via)) }
    }

    struct NoTokens;
    impl TokenResolver for NoTokens {
        fn resolve_probe_id(&mut self, _: &str, _: u64) -> Option<(Ipv4Addr, Ipv4Addr)> {
            None
        }
    }

    struct OneToken(u64, Ipv4Addr, Ipv4Addr);
    impl TokenResolver for OneToken {
        fn resolve_probe_id(&mut self, _: &str, t: u64) -> Option<(Ipv4Addr, Ipv4Addr)> {
            (t == self.0).then_some((self.1, self.2))
        }
    }

    fn keys() -> ControllerKeyPair {
        ControllerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(1))
    }

    /// Two uplinks; 10.9.0.0/16 reachable on both.
    fn agent(kind: MiddleboxKind) -> AgentState {
        let mut mb = Middlebox::new(
            "mb1",
            kind,
            vec![
                Interface::new("eth0", ip("10.0.0.1"), 30),
                Interface::new("eth1", ip("10.0.0.5"), 30),
                Interface::new("eth2", ip("10.0.0.9"), 30),
            ],
        );
        mb.routes = vec![
            route("10.9.0.0/16", "eth1", "10.0.0.6"),
            route("10.9.0.0/16", "eth2", "10.0.0.10"),
            route("10.8.0.1/32", "eth1", "10.0.0.6"),
            route("10.8.0.2/32", "eth2", "10.0.0.10"),
        ];
        AgentState::new(mb, keys().public_key().clone(), 32)
    }

    fn init(targets: &[&str], flags: ProbeFlags) -> ProbeInit {
        ProbeInit {
            source: "mb1".into(),
            dest_device: "mb9".into(),
            targets: targets.iter().map(|t| ProbeTarget { ip: ip(t), token: None }).collect(),
            flags,
            ttl_max: 32,
            path_id: 0,
        }
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn init_collapses_shared_egress() {
        let st = agent(MiddleboxKind::Firewall);
        let out = st.handle_probe_init(&init(&["10.9.1.1", "10.9.1.2"], ProbeFlags::default()), &mut rng()).unwrap();
        assert_eq!(out.len(), 1);
        let p = &out[0].forward.probe;
        assert_eq!(p.header.probe_ttl, 0);
        assert_eq!(p.header.path_id, 0);
        assert_eq!(p.entries().unwrap(), &[PayloadEntry::source("mb1", "eth1")]);
        assert_eq!(p.header.pair, ProbePairId::Clear { src: ip("10.0.0.5"), dst: ip("10.9.1.1") });
    }

    #[test]
    fn init_emits_one_probe_per_distinct_egress() {
        let st = agent(MiddleboxKind::Firewall);
        let out = st.handle_probe_init(&init(&["10.8.0.1", "10.8.0.2"], ProbeFlags::default()), &mut rng()).unwrap();
        let egress: Vec<_> = out.iter().map(|o| o.forward.egress.as_str()).collect();
        assert_eq!(egress, ["eth1", "eth2"]);
    }

    #[test]
    fn init_unreachable() {
        let st = agent(MiddleboxKind::Firewall);
        let err = st.handle_probe_init(&init(&["192.168.5.5"], ProbeFlags::default()), &mut rng()).unwrap_err();
        assert_eq!(err, AgentError::NoRouteToDestination("mb9".into()));
    }

    #[test]
    fn init_reports_only_without_append() {
        let st = agent(MiddleboxKind::Firewall);
        let plain = st.handle_probe_init(&init(&["10.8.0.1"], ProbeFlags::default()), &mut rng()).unwrap();
        assert!(plain[0].report.is_some());
        let flags = ProbeFlags { payload_append: true, ..Default::default() };
        let app = st.handle_probe_init(&init(&["10.8.0.1"], flags), &mut rng()).unwrap();
        assert!(app[0].report.is_none());
    }

    #[test]
    fn init_header_sec_needs_token() {
        let st = agent(MiddleboxKind::Firewall);
        let flags = ProbeFlags { header_sec: true, ..Default::default() };
        let err = st.handle_probe_init(&init(&["10.8.0.1"], flags), &mut rng()).unwrap_err();
        assert_eq!(err, AgentError::MissingToken(ip("10.8.0.1")));
    }

    fn arriving(flags: ProbeFlags, dst: &str) -> ProbeMessage {
        let header = ProbeHeader::discovery(flags, ProbePairId::Clear { src: ip("10.7.0.1"), dst: ip(dst) });
        ProbeMessage::new(header, Payload::Entries(vec![PayloadEntry::source("mb0", "eth3")]))
    }

    #[test]
    fn mid_path_append_adds_one_entry() {
        let mut st = agent(MiddleboxKind::Firewall);
        let flags = ProbeFlags { payload_append: true, ..Default::default() };
        let act = st
            .handle_incoming_probe(&arriving(flags, "10.8.0.1"), "eth0", &mut NoTokens, &mut rng(), &mut rng())
            .unwrap();
        let Action::AppendAndForward { forward } = act else { panic!("{act:?}") };
        let entries = forward.probe.entries().unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1], PayloadEntry::transit("mb1", "eth0", OutInterface::Named("eth1".into())));
        assert_eq!(forward.probe.header.probe_ttl, 1);
        assert_eq!(forward.link_target, ip("10.0.0.6"));
    }

    #[test]
    fn mid_path_without_append_up_calls() {
        let mut st = agent(MiddleboxKind::Firewall);
        let act = st
            .handle_incoming_probe(
                &arriving(ProbeFlags::default(), "10.8.0.1"),
                "eth0",
                &mut NoTokens,
                &mut rng(),
                &mut rng(),
            )
            .unwrap();
        let Action::UpCallAndForward { report, forward } = act else { panic!("{act:?}") };
        assert_eq!(report.ttl, 1);
        assert_eq!(report.device, "mb1");
        assert_eq!(forward.probe.entries().unwrap().len(), 1);
    }

    #[test]
    fn terminal_up_calls_full_payload() {
        let mut st = agent(MiddleboxKind::Firewall);
        let flags = ProbeFlags { payload_append: true, ..Default::default() };
        let act = st
            .handle_incoming_probe(&arriving(flags, "10.0.0.9"), "eth0", &mut NoTokens, &mut rng(), &mut rng())
            .unwrap();
        let Action::TerminalUpCall { report } = act else { panic!("{act:?}") };
        let Payload::Entries(e) = report.payload else { panic!() };
        assert_eq!(e, vec![PayloadEntry::source("mb0", "eth3"), PayloadEntry::terminal("mb1", "eth0")]);
    }

    #[test]
    fn ttl_exhaustion_drops() {
        let mut st = agent(MiddleboxKind::Firewall);
        let mut msg = arriving(ProbeFlags::default(), "10.8.0.1");
        msg.header.probe_ttl = 31;
        let act = st.handle_incoming_probe(&msg, "eth0", &mut NoTokens, &mut rng(), &mut rng()).unwrap();
        assert_eq!(act, Action::Drop { reason: DropReason::TtlExpired });
    }

    #[test]
    fn unresolvable_token_drops_with_alert() {
        let mut st = agent(MiddleboxKind::Firewall);
        let flags = ProbeFlags { header_sec: true, ..Default::default() };
        let msg = ProbeMessage::new(ProbeHeader::discovery(flags, ProbePairId::Token(5)), Payload::Entries(vec![]));
        let act = st.handle_incoming_probe(&msg, "eth0", &mut NoTokens, &mut rng(), &mut rng()).unwrap();
        assert_eq!(act, Action::Drop { reason: DropReason::UnresolvableToken(5) });
        let mut ok = OneToken(5, ip("10.7.0.1"), ip("10.8.0.2"));
        let act = st.handle_incoming_probe(&msg, "eth0", &mut ok, &mut rng(), &mut rng()).unwrap();
        let Action::UpCallAndForward { forward, .. } = act else { panic!("{act:?}") };
        assert_eq!(forward.egress, "eth2");
    }

    #[test]
    fn sealed_entries_open_at_controller() {
        let kp = keys();
        let mut st = agent(MiddleboxKind::Firewall);
        let flags = ProbeFlags { payload_sec: true, ..Default::default() };
        let msg = ProbeMessage::new(
            ProbeHeader::discovery(flags, ProbePairId::Clear { src: ip("10.7.0.1"), dst: ip("10.8.0.1") }),
            Payload::Sealed(vec![]),
        );
        let act = st.handle_incoming_probe(&msg, "eth0", &mut NoTokens, &mut rng(), &mut rng()).unwrap();
        let Action::UpCallAndForward { report, .. } = act else { panic!("{act:?}") };
        let Payload::Sealed(segs) = &report.payload else { panic!() };
        let hdr = AuthenticatedHeaderFields::new(report.pair, report.flags);
        let plain = open_payload(&segs[0], &hdr, kp.private_key()).unwrap();
        let entry = PayloadEntry::decode_line(std::str::from_utf8(&plain).unwrap()).unwrap();
        assert_eq!(entry.device_id, "mb1");
    }

    #[test]
    fn non_dynamic_predicts_exactly() {
        let st = agent(MiddleboxKind::Firewall);
        let d = st.compute_output_interface(ip("10.9.3.3"), EgressMode::RoutePredict, &mut rng()).unwrap();
        assert_eq!(d.predicted.name(), Some(d.actual.as_str()));
        assert!(!d.correction_needed);
    }

    #[test]
    fn load_balancer_correction_carries_actual() {
        let mut st = agent(MiddleboxKind::LoadBalancer);
        let mut r = rng();
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..50 {
            let act = st
                .handle_incoming_probe(
                    &arriving(ProbeFlags::default(), "10.9.1.1"),
                    "eth0",
                    &mut NoTokens,
                    &mut r,
                    &mut rng(),
                )
                .unwrap();
            let Action::UpCallAndForward { forward, report } = act else { panic!() };
            let Payload::Entries(e) = report.payload else { panic!() };
            assert_eq!(e[0].out_interface, OutInterface::Pending);
            let c = forward.correction.expect("correction");
            assert_eq!(c.out_interface, forward.egress);
            seen.insert(forward.egress);
        }
        assert_eq!(seen.len(), 2);
        assert!(st.egress_log.iter().all(|r| r.predicted_out != OutInterface::Named(r.actual_out.clone())));
    }

    #[test]
    fn static_steer_pins_load_balancer() {
        let st = agent(MiddleboxKind::LoadBalancer);
        for seed in 0..100 {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let d = st.compute_output_interface(ip("10.9.1.1"), EgressMode::StaticSteer, &mut r).unwrap();
            assert_eq!(d.actual, "eth1");
            assert!(!d.correction_needed);
        }
    }

    fn path_probe(path_id: u32, dst: &str) -> ProbeMessage {
        let header = ProbeHeader {
            probe_ttl: 0,
            path_id,
            payload_length: 0,
            flags: ProbeFlags { payload_append: true, ..Default::default() },
            pair: ProbePairId::Clear { src: ip("10.7.0.1"), dst: ip(dst) },
        };
        ProbeMessage::new(header, Payload::Entries(vec![PayloadEntry::source("mb0", "eth0")]))
    }

    #[test]
    fn path_checker_follows_rule() {
        let mut st = agent(MiddleboxKind::Firewall);
        st.install_path_rule(3, "eth2", ip("10.0.0.10")).unwrap();
        let PathAction::Forward(f) = st.handle_path_checker(&path_probe(3, "10.9.9.9"), "eth0").unwrap() else {
            panic!()
        };
        assert_eq!(f.egress, "eth2");
        assert_eq!(f.probe.header.transport_port(), 7081);
        let err = st.handle_path_checker(&path_probe(5, "10.9.9.9"), "eth0").unwrap_err();
        assert_eq!(err, AgentError::PathBroken { device: "mb1".into(), path_id: 5 });
    }

    #[test]
    fn path_checker_terminal_reports_trace() {
        let st = agent(MiddleboxKind::Firewall);
        let PathAction::PathOk(r) = st.handle_path_checker(&path_probe(2, "10.0.0.1"), "eth0").unwrap() else {
            panic!()
        };
        let Payload::Entries(e) = r.payload else { panic!() };
        assert_eq!(e.len(), 2);
    }

    #[test]
    fn discovery_probe_ignores_path_rules() {
        let mut st = agent(MiddleboxKind::Firewall);
        st.install_path_rule(1, "eth2", ip("10.0.0.10")).unwrap();
        assert!(matches!(
            st.handle_path_checker(&arriving(ProbeFlags::default(), "10.8.0.1"), "eth0"),
            Err(AgentError::WrongProbeKind { .. })
        ));
        let act = st
            .handle_incoming_probe(
                &arriving(ProbeFlags::default(), "10.8.0.1"),
                "eth0",
                &mut NoTokens,
                &mut rng(),
                &mut rng(),
            )
            .unwrap();
        let Action::UpCallAndForward { forward, .. } = act else { panic!() };
        assert_eq!(forward.egress, "eth1");
    }

    #[test]
    fn heartbeat_carries_time() {
        let hb = agent(MiddleboxKind::Firewall).heartbeat_tick(4242);
        assert_eq!(hb.at, 4242);
        assert_eq!(hb.status, DeviceStatus::Up);
    }
}
