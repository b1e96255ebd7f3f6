//! Agent/controller API messages.
//!
//! Every message is `API: <NAME>` followed by `KEY: value` lines. List-valued
//! fields repeat their key, in order.

use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{Interface, MiddleboxKind, Prefix};
use crate::probe::{OutInterface, Payload, PayloadEntry, ProbeError, ProbeFlags, ProbePairId};
use crate::security::SealedPayload;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown API {0:?}")]
    UnknownApi(String),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceCapabilities {
    pub device: String,
    pub kind: MiddleboxKind,
    pub dynamic_egress: bool,
    pub interfaces: Vec<Interface>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeTarget {
    pub ip: Ipv4Addr,
    pub token: Option<u64>,
}

/// Tells a source agent to originate probes. `path_id > 0` starts a path
/// check instead of discovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeInit {
    pub source: String,
    pub dest_device: String,
    pub targets: Vec<ProbeTarget>,
    pub flags: ProbeFlags,
    pub ttl_max: u32,
    pub path_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeUpdate {
    pub device: String,
    pub pair: ProbePairId,
    pub ttl: u32,
    pub path_id: u32,
    pub flags: ProbeFlags,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutInterfaceUpdate {
    pub device: String,
    pub pair: ProbePairId,
    pub ttl: u32,
    pub out_interface: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolveProbeId {
    pub device: String,
    pub token: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolveReply {
    pub token: u64,
    pub pair: Option<(Ipv4Addr, Ipv4Addr)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceStatus {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Heartbeat {
    pub device: String,
    pub status: DeviceStatus,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiMessage {
    DeviceCapabilities(DeviceCapabilities),
    ProbeInit(ProbeInit),
    ProbeUpdate(ProbeUpdate),
    UpdateOutInterface(OutInterfaceUpdate),
    ResolveProbeId(ResolveProbeId),
    ResolveReply(ResolveReply),
    Heartbeat(Heartbeat),
}

impl ApiMessage {
    pub fn name(&self) -> &'static str {
        match self {
            ApiMessage::DeviceCapabilities(_) => "DEVICE-CAPABILITIES",
            ApiMessage::ProbeInit(_) => "PROBE-INIT",
            ApiMessage::ProbeUpdate(_) => "PROBE-UPDATE",
            ApiMessage::UpdateOutInterface(_) => "UPDATE-OUTINTERFACE",
            ApiMessage::ResolveProbeId(_) => "RESOLVE-PROBEID",
            ApiMessage::ResolveReply(_) => "RESOLVE-PROBEID-REPLY",
            ApiMessage::Heartbeat(_) => "HEARTBEAT",
        }
    }

    pub fn encode(&self) -> String {
        let mut w = Writer(format!("API: {}\n", self.name()));
        match self {
            ApiMessage::DeviceCapabilities(c) => {
                w.kv("DEVICE", &c.device);
                w.kv("KIND", c.kind);
                w.kv("DYNAMIC-EGRESS", c.dynamic_egress);
                for i in &c.interfaces {
                    w.kv("INTERFACE", format!("{} {}/{}", i.name, i.ip, i.prefix_len));
                }
            }
            ApiMessage::ProbeInit(p) => {
                w.kv("DEVICE", &p.source);
                w.kv("DEST-DEVICE", &p.dest_device);
                for t in &p.targets {
                    match t.token {
                        Some(tok) => w.kv("TARGET", format!("{} {}", t.ip, ProbePairId::Token(tok))),
                        None => w.kv("TARGET", t.ip),
                    }
                }
                w.flags(&p.flags);
                w.kv("TTL-MAX", p.ttl_max);
                w.kv("PATH-ID", p.path_id);
            }
            ApiMessage::ProbeUpdate(u) => {
                w.kv("DEVICE", &u.device);
                w.kv("PROBE-PAIR-ID", u.pair);
                w.kv("PROBE-TTL", u.ttl);
                w.kv("PATH-ID", u.path_id);
                w.flags(&u.flags);
                match &u.payload {
                    Payload::Entries(entries) => {
                        for e in entries {
                            w.kv("ENTRY", e.encode_line());
                        }
                    }
                    Payload::Sealed(segs) => {
                        for s in segs {
                            w.kv("SEG", s.encode_line());
                        }
                    }
                }
            }
            ApiMessage::UpdateOutInterface(u) => {
                w.kv("DEVICE", &u.device);
                w.kv("PROBE-PAIR-ID", u.pair);
                w.kv("PROBE-TTL", u.ttl);
                w.kv("OUT-INTERFACE", &u.out_interface);
            }
            ApiMessage::ResolveProbeId(r) => {
                w.kv("DEVICE", &r.device);
                w.kv("TOKEN", ProbePairId::Token(r.token));
            }
            ApiMessage::ResolveReply(r) => {
                w.kv("TOKEN", ProbePairId::Token(r.token));
                match r.pair {
                    Some((src, dst)) => w.kv("PROBE-PAIR", ProbePairId::Clear { src, dst }),
                    None => w.kv("ERROR", "UNKNOWN-TOKEN"),
                }
            }
            ApiMessage::Heartbeat(h) => {
                w.kv("DEVICE", &h.device);
                w.kv("STATUS", if h.status == DeviceStatus::Up { "UP" } else { "DOWN" });
                w.kv("TIME", h.at);
            }
        }
        w.0
    }

    pub fn decode(text: &str) -> Result<Self, MessageError> {
        let body =
            text.strip_suffix('\n').ok_or_else(|| MessageError::Malformed("message must end with a newline".into()))?;
        let mut lines = body.split('\n');
        let first = lines.next().unwrap_or_default();
        let api = first
            .strip_prefix("API: ")
            .ok_or_else(|| MessageError::Malformed(format!("expected API line, got {first:?}")))?;
        let mut fields = Vec::new();
        for line in lines {
            let (k, v) = line
                .split_once(": ")
                .or_else(|| line.strip_suffix(':').map(|k| (k, "")))
                .ok_or_else(|| MessageError::Malformed(format!("expected KEY: value, got {line:?}")))?;
            fields.push((k, v));
        }
        let f = Fields(fields);
        let msg = match api {
            "DEVICE-CAPABILITIES" => {
                f.only(&["DEVICE", "KIND", "DYNAMIC-EGRESS", "INTERFACE"])?;
                let interfaces = f
                    .many("INTERFACE")
                    .map(|v| {
                        let (name, addr) =
                            v.split_once(' ').ok_or_else(|| MessageError::Malformed(format!("bad INTERFACE {v:?}")))?;
                        let p: Prefix =
                            addr.parse().map_err(|_| MessageError::Malformed(format!("bad address {addr}")))?;
                        Ok(Interface::new(name, p.addr, p.len))
                    })
                    .collect::<Result<_, MessageError>>()?;
                ApiMessage::DeviceCapabilities(DeviceCapabilities {
                    device: f.one("DEVICE")?.to_string(),
                    kind: f.one("KIND")?.parse().map_err(MessageError::Malformed)?,
                    dynamic_egress: f.parse("DYNAMIC-EGRESS")?,
                    interfaces,
                })
            }
            "PROBE-INIT" => {
                f.only(&["DEVICE", "DEST-DEVICE", "TARGET", "FLAGS", "TTL-MAX", "PATH-ID"])?;
                let targets = f
                    .many("TARGET")
                    .map(|v| {
                        let (ip, tok) = match v.split_once(' ') {
                            Some((ip, tok)) => (ip, Some(tok)),
                            None => (v, None),
                        };
                        let token = match tok.map(str::parse::<ProbePairId>).transpose()? {
                            Some(ProbePairId::Token(t)) => Some(t),
                            Some(_) => return Err(MessageError::Malformed(format!("bad TARGET token {v:?}"))),
                            None => None,
                        };
                        Ok(ProbeTarget { ip: parse_ip(ip)?, token })
                    })
                    .collect::<Result<_, MessageError>>()?;
                ApiMessage::ProbeInit(ProbeInit {
                    source: f.one("DEVICE")?.to_string(),
                    dest_device: f.one("DEST-DEVICE")?.to_string(),
                    targets,
                    flags: f.one("FLAGS")?.parse()?,
                    ttl_max: f.parse("TTL-MAX")?,
                    path_id: f.parse("PATH-ID")?,
                })
            }
            "PROBE-UPDATE" => {
                f.only(&["DEVICE", "PROBE-PAIR-ID", "PROBE-TTL", "PATH-ID", "FLAGS", "ENTRY", "SEG"])?;
                let flags: ProbeFlags = f.one("FLAGS")?.parse()?;
                let payload = if flags.payload_sec {
                    if f.many("ENTRY").next().is_some() {
                        return Err(MessageError::Malformed("clear ENTRY in sealed update".into()));
                    }
                    Payload::Sealed(f.many("SEG").map(SealedPayload::decode_line).collect::<Result<_, _>>()?)
                } else {
                    if f.many("SEG").next().is_some() {
                        return Err(MessageError::Malformed("SEG in clear update".into()));
                    }
                    Payload::Entries(f.many("ENTRY").map(PayloadEntry::decode_line).collect::<Result<_, _>>()?)
                };
                ApiMessage::ProbeUpdate(ProbeUpdate {
                    device: f.one("DEVICE")?.to_string(),
                    pair: f.one("PROBE-PAIR-ID")?.parse()?,
                    ttl: f.parse("PROBE-TTL")?,
                    path_id: f.parse("PATH-ID")?,
                    flags,
                    payload,
                })
            }
            "UPDATE-OUTINTERFACE" => {
                f.only(&["DEVICE", "PROBE-PAIR-ID", "PROBE-TTL", "OUT-INTERFACE"])?;
                ApiMessage::UpdateOutInterface(OutInterfaceUpdate {
                    device: f.one("DEVICE")?.to_string(),
                    pair: f.one("PROBE-PAIR-ID")?.parse()?,
                    ttl: f.parse("PROBE-TTL")?,
                    out_interface: f.one("OUT-INTERFACE")?.to_string(),
                })
            }
            "RESOLVE-PROBEID" => {
                f.only(&["DEVICE", "TOKEN"])?;
                ApiMessage::ResolveProbeId(ResolveProbeId {
                    device: f.one("DEVICE")?.to_string(),
                    token: parse_token(f.one("TOKEN")?)?,
                })
            }
            "RESOLVE-PROBEID-REPLY" => {
                f.only(&["TOKEN", "PROBE-PAIR", "ERROR"])?;
                let pair = match f.opt("PROBE-PAIR")? {
                    Some(v) => match v.parse::<ProbePairId>()? {
                        ProbePairId::Clear { src, dst } => Some((src, dst)),
                        ProbePairId::Token(_) => {
                            return Err(MessageError::Malformed("PROBE-PAIR must be clear".into()))
                        }
                    },
                    None => {
                        f.one("ERROR")?;
                        None
                    }
                };
                ApiMessage::ResolveReply(ResolveReply { token: parse_token(f.one("TOKEN")?)?, pair })
            }
            "HEARTBEAT" => {
                f.only(&["DEVICE", "STATUS", "TIME"])?;
                let status = match f.one("STATUS")? {
                    "UP" => DeviceStatus::Up,
                    "DOWN" => DeviceStatus::Down,
                    other => return Err(MessageError::Malformed(format!("bad STATUS {other:?}"))),
                };
                ApiMessage::Heartbeat(Heartbeat { device: f.one("DEVICE")?.to_string(), status, at: f.parse("TIME")? })
            }
            other => return Err(MessageError::UnknownApi(other.to_string())),
        };
        Ok(msg)
    }
}

impl OutInterfaceUpdate {
    pub fn corrected(&self) -> OutInterface {
        OutInterface::Named(self.out_interface.clone())
    }
}

struct Writer(String);

impl Writer {
    fn kv(&mut self, key: &str, value: impl std::fmt::Display) {
        self.0.push_str(key);
        self.0.push_str(": ");
        self.0.push_str(&value.to_string());
        self.0.push('\n');
    }

    fn flags(&mut self, flags: &ProbeFlags) {
        let rendered = flags.to_string();
        if rendered.is_empty() {
            self.0.push_str("FLAGS:\n");
        } else {
            self.kv("FLAGS", rendered);
        }
    }
}

struct Fields<'a>(Vec<(&'a str, &'a str)>);

impl<'a> Fields<'a> {
    fn only(&self, allowed: &[&str]) -> Result<(), MessageError> {
        match self.0.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(MessageError::Malformed(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    fn many(&self, key: &'a str) -> impl Iterator<Item = &'a str> + '_ {
        self.0.iter().filter(move |(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn opt(&self, key: &str) -> Result<Option<&'a str>, MessageError> {
        let mut it = self.0.iter().filter(|(k, _)| *k == key);
        let first = it.next().map(|(_, v)| *v);
        if it.next().is_some() {
            return Err(MessageError::Malformed(format!("duplicate key {key}")));
        }
        Ok(first)
    }

    fn one(&self, key: &str) -> Result<&'a str, MessageError> {
        self.opt(key)?.ok_or_else(|| MessageError::Malformed(format!("missing key {key}")))
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, MessageError> {
        let raw = self.one(key)?;
        raw.parse().map_err(|_| MessageError::Malformed(format!("bad value for {key}: {raw:?}")))
    }
}

fn parse_ip(s: &str) -> Result<Ipv4Addr, MessageError> {
    s.parse().map_err(|_| MessageError::Malformed(format!("bad IPv4 address {s:?}")))
}

fn parse_token(s: &str) -> Result<u64, MessageError> {
    match s.parse::<ProbePairId>()? {
        ProbePairId::Token(t) => Ok(t),
        ProbePairId::Clear { .. } => Err(MessageError::Malformed(format!("expected token, got {s}"))),
    }
}
