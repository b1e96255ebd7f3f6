//! Probe messages and their line-oriented text wire format.
//!
//! ```text
//! TOPOMAN/1 DISCOVERY
//! PROBE-TTL: 0
//! PATH-ID: 0
//! PAYLOAD-LENGTH: 27
//! FLAGS: APPEND
//! PROBE-PAIR-ID: 10.0.1.1->10.0.9.1
//!
//! device=mb3;in=NONE;out=eth1
//! ```
//!
//! The payload section is everything after the blank line. Each entry (or
//! sealed segment) is one `\n`-terminated line and `PAYLOAD-LENGTH` is the
//! exact byte count of that section.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use thiserror::Error;

use crate::security::SealedPayload;

pub const PROTOCOL_TAG: &str = "TOPOMAN/1";
pub const DEFAULT_TTL_MAX: u32 = 32;
/// Transport port of discovery probes.
pub const DISCOVERY_PORT: u16 = 7077;
/// Path-checker probes use `PATH_CHECK_PORT_BASE + path_id`.
pub const PATH_CHECK_PORT_BASE: u16 = 7078;

const KEY_TTL: &str = "PROBE-TTL";
const KEY_PATH_ID: &str = "PATH-ID";
const KEY_PAYLOAD_LENGTH: &str = "PAYLOAD-LENGTH";
const KEY_FLAGS: &str = "FLAGS";
const KEY_PAIR: &str = "PROBE-PAIR-ID";
const HEADER_KEYS: [&str; 5] = [KEY_TTL, KEY_PATH_ID, KEY_PAYLOAD_LENGTH, KEY_FLAGS, KEY_PAIR];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProbeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload length mismatch: header declares {declared} bytes, payload has {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("bad value: {0}")]
    BadValue(String),
    #[error("probe does not carry the payload-append flag")]
    AppendOnNonAppendProbe,
    #[error("payload is sealed; plain entries cannot be appended")]
    SealedPayload,
}

/// Identity of the probe-pair as carried in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProbePairId {
    Clear { src: Ipv4Addr, dst: Ipv4Addr },
    Token(u64),
}

impl fmt::Display for ProbePairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProbePairId::Clear { src, dst } => write!(f, "{src}->{dst}"),
            ProbePairId::Token(t) => write!(f, "0x{t:016x}"),
        }
    }
}

impl FromStr for ProbePairId {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(hex) = s.strip_prefix("0x") {
            if hex.len() != 16 {
                return Err(ProbeError::BadValue(format!("token must be 16 hex digits: {s}")));
            }
            return u64::from_str_radix(hex, 16)
                .map(ProbePairId::Token)
                .map_err(|_| ProbeError::BadValue(format!("bad token: {s}")));
        }
        let (a, b) = s.split_once("->").ok_or_else(|| ProbeError::BadValue(format!("bad probe-pair id: {s}")))?;
        let src = parse_ip(a)?;
        let dst = parse_ip(b)?;
        Ok(ProbePairId::Clear { src, dst })
    }
}

fn parse_ip(s: &str) -> Result<Ipv4Addr, ProbeError> {
    s.parse().map_err(|_| ProbeError::BadValue(format!("bad IPv4 address: {s}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ProbeFlags {
    pub payload_append: bool,
    pub header_sec: bool,
    pub payload_sec: bool,
}

impl fmt::Display for ProbeFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut tokens = Vec::with_capacity(3);
        if self.payload_append {
            tokens.push("APPEND");
        }
        if self.header_sec {
            tokens.push("HDRSEC");
        }
        if self.payload_sec {
            tokens.push("PAYSEC");
        }
        f.write_str(&tokens.join(","))
    }
}

impl FromStr for ProbeFlags {
    type Err = ProbeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut flags = ProbeFlags::default();
        if s.is_empty() {
            return Ok(flags);
        }
        for token in s.split(',') {
            let slot = match token {
                "APPEND" => &mut flags.payload_append,
                "HDRSEC" => &mut flags.header_sec,
                "PAYSEC" => &mut flags.payload_sec,
                other => return Err(ProbeError::BadValue(format!("unknown flag {other:?}"))),
            };
            if *slot {
                return Err(ProbeError::BadValue(format!("duplicate flag {token}")));
            }
            *slot = true;
        }
        Ok(flags)
    }
}

/// `FLAGS: ...` line exactly as it appears on the wire.
pub(crate) fn flags_line(flags: &ProbeFlags) -> String {
    let rendered = flags.to_string();
    if rendered.is_empty() {
        format!("{KEY_FLAGS}:\n")
    } else {
        format!("{KEY_FLAGS}: {rendered}\n")
    }
}

pub(crate) fn pair_line(pair: &ProbePairId) -> String {
    format!("{KEY_PAIR}: {pair}\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Discovery,
    PathChecker,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeHeader {
    pub probe_ttl: u32,
    pub path_id: u32,
    pub payload_length: usize,
    pub flags: ProbeFlags,
    pub pair: ProbePairId,
}

impl ProbeHeader {
    pub fn discovery(flags: ProbeFlags, pair: ProbePairId) -> Self {
        ProbeHeader { probe_ttl: 0, path_id: 0, payload_length: 0, flags, pair }
    }

    pub fn kind(&self) -> ProbeKind {
        classify_probe(self)
    }

    /// Destination address when the pair is carried in clear.
    pub fn clear_destination(&self) -> Option<Ipv4Addr> {
        match self.pair {
            ProbePairId::Clear { dst, .. } => Some(dst),
            ProbePairId::Token(_) => None,
        }
    }

    /// Transport port the probe is addressed to.
    pub fn transport_port(&self) -> u16 {
        match self.kind() {
            ProbeKind::Discovery => DISCOVERY_PORT,
            ProbeKind::PathChecker => PATH_CHECK_PORT_BASE.saturating_add(self.path_id as u16),
        }
    }
}

pub fn classify_probe(header: &ProbeHeader) -> ProbeKind {
    if header.path_id == 0 {
        ProbeKind::Discovery
    } else {
        ProbeKind::PathChecker
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TtlOutcome {
    Forward(u32),
    Discard,
}

/// Increments the hop counter; the probe is discarded once the counter would
/// reach `max_threshold`.
pub fn advance_ttl(header: &ProbeHeader, max_threshold: u32) -> Option<ProbeHeader> {
    match next_ttl(header.probe_ttl, max_threshold) {
        TtlOutcome::Forward(ttl) => Some(ProbeHeader { probe_ttl: ttl, ..header.clone() }),
        TtlOutcome::Discard => None,
    }
}

pub fn next_ttl(ttl: u32, max_threshold: u32) -> TtlOutcome {
    debug_assert!(max_threshold >= 1);
    match ttl.checked_add(1) {
        Some(next) if next < max_threshold => TtlOutcome::Forward(next),
        _ => TtlOutcome::Discard,
    }
}

/// Output interface recorded for a hop.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OutInterface {
    Named(String),
    /// Egress not known when the entry was written; corrected by a follow-up
    /// UPDATE-OUTINTERFACE message.
    Pending,
    /// Destination hop.
    None,
}

impl OutInterface {
    pub fn name(&self) -> Option<&str> {
        match self {
            OutInterface::Named(n) => Some(n),
            _ => None,
        }
    }
}

impl fmt::Display for OutInterface {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutInterface::Named(n) => f.write_str(n),
            OutInterface::Pending => f.write_str("PENDING"),
            OutInterface::None => f.write_str("NONE"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PayloadEntry {
    pub device_id: String,
    /// `None` on the source hop.
    pub in_interface: Option<String>,
    pub out_interface: OutInterface,
}

impl PayloadEntry {
    pub fn source(device: &str, out: &str) -> Self {
        PayloadEntry {
            device_id: device.to_string(),
            in_interface: None,
            out_interface: OutInterface::Named(out.to_string()),
        }
    }

    pub fn transit(device: &str, input: &str, out: OutInterface) -> Self {
        PayloadEntry { device_id: device.to_string(), in_interface: Some(input.to_string()), out_interface: out }
    }

    pub fn terminal(device: &str, input: &str) -> Self {
        PayloadEntry {
            device_id: device.to_string(),
            in_interface: Some(input.to_string()),
            out_interface: OutInterface::None,
        }
    }

    /// One wire line, without the trailing newline.
    pub fn encode_line(&self) -> String {
        format!(
            "device={};in={};out={}",
            self.device_id,
            self.in_interface.as_deref().unwrap_or("NONE"),
            self.out_interface
        )
    }

    pub fn decode_line(line: &str) -> Result<Self, ProbeError> {
        let mut parts = line.split(';');
        let mut field = |key: &str| -> Result<&str, ProbeError> {
            let part = parts.next().ok_or_else(|| ProbeError::BadValue(format!("entry missing {key}: {line}")))?;
            part.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix('='))
                .ok_or_else(|| ProbeError::BadValue(format!("entry expected {key}=...: {line}")))
        };
        let device = field("device")?;
        let input = field("in")?;
        let out = field("out")?;
        if parts.next().is_some() {
            return Err(ProbeError::BadValue(format!("trailing entry fields: {line}")));
        }
        if !is_wire_name(device) || matches!(device, "NONE" | "PENDING") {
            return Err(ProbeError::BadValue(format!("bad device id {device:?}")));
        }
        let in_interface = match input {
            "NONE" => None,
            name if is_wire_name(name) && name != "PENDING" => Some(name.to_string()),
            other => return Err(ProbeError::BadValue(format!("bad in interface {other:?}"))),
        };
        let out_interface = match out {
            "NONE" => OutInterface::None,
            "PENDING" => OutInterface::Pending,
            name if is_wire_name(name) => OutInterface::Named(name.to_string()),
            other => return Err(ProbeError::BadValue(format!("bad out interface {other:?}"))),
        };
        Ok(PayloadEntry { device_id: device.to_string(), in_interface, out_interface })
    }
}

/// Identifiers that can appear in entries and config files.
pub fn is_wire_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Entries(Vec<PayloadEntry>),
    /// One sealed segment per hop.
    Sealed(Vec<SealedPayload>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Entries(e) => e.len(),
            Payload::Sealed(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn encode(&self) -> String {
        let mut out = String::new();
        match self {
            Payload::Entries(entries) => {
                for e in entries {
                    out.push_str(&e.encode_line());
                    out.push('\n');
                }
            }
            Payload::Sealed(segments) => {
                for s in segments {
                    out.push_str(&s.encode_line());
                    out.push('\n');
                }
            }
        }
        out
    }

    fn decode(section: &str, sealed: bool) -> Result<Self, ProbeError> {
        if section.is_empty() {
            return Ok(if sealed { Payload::Sealed(Vec::new()) } else { Payload::Entries(Vec::new()) });
        }
        let body =
            section.strip_suffix('\n').ok_or_else(|| ProbeError::BadValue("payload not newline terminated".into()))?;
        if sealed {
            body.split('\n').map(SealedPayload::decode_line).collect::<Result<_, _>>().map(Payload::Sealed)
        } else {
            body.split('\n').map(PayloadEntry::decode_line).collect::<Result<_, _>>().map(Payload::Entries)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeMessage {
    pub header: ProbeHeader,
    pub payload: Payload,
}

impl ProbeMessage {
    /// Builds a message and sets `payload_length` from the payload.
    pub fn new(mut header: ProbeHeader, payload: Payload) -> Self {
        header.payload_length = payload.encode().len();
        ProbeMessage { header, payload }
    }

    pub fn set_payload(&mut self, payload: Payload) {
        self.header.payload_length = payload.encode().len();
        self.payload = payload;
    }

    pub fn entries(&self) -> Option<&[PayloadEntry]> {
        match &self.payload {
            Payload::Entries(e) => Some(e),
            Payload::Sealed(_) => None,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_message(self)
    }
}

pub fn encode_message(msg: &ProbeMessage) -> Vec<u8> {
    let payload = msg.payload.encode();
    debug_assert_eq!(payload.len(), msg.header.payload_length);
    let h = &msg.header;
    let kind = match h.kind() {
        ProbeKind::Discovery => "DISCOVERY",
        ProbeKind::PathChecker => "PATHCHECK",
    };
    let mut out = String::with_capacity(128 + payload.len());
    out.push_str(&format!("{PROTOCOL_TAG} {kind}\n"));
    out.push_str(&format!("{KEY_TTL}: {}\n", h.probe_ttl));
    out.push_str(&format!("{KEY_PATH_ID}: {}\n", h.path_id));
    out.push_str(&format!("{KEY_PAYLOAD_LENGTH}: {}\n", payload.len()));
    out.push_str(&flags_line(&h.flags));
    out.push_str(&pair_line(&h.pair));
    out.push('\n');
    out.push_str(&payload);
    out.into_bytes()
}

pub fn decode_message(bytes: &[u8]) -> Result<ProbeMessage, ProbeError> {
    let text =
        std::str::from_utf8(bytes).map_err(|_| ProbeError::MalformedHeader("message is not valid UTF-8".into()))?;
    let (head, payload_section) =
        text.split_once("\n\n").ok_or_else(|| ProbeError::MalformedHeader("missing blank line after header".into()))?;
    let mut lines = head.split('\n');
    let first = lines.next().unwrap_or_default();
    let kind_tag = first
        .strip_prefix(PROTOCOL_TAG)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| ProbeError::MalformedHeader(format!("bad protocol line {first:?}")))?;

    let mut values: [Option<&str>; 5] = [None; 5];
    for line in lines {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| ProbeError::MalformedHeader(format!("expected KEY: value, got {line:?}")))?;
        let slot = HEADER_KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| ProbeError::MalformedHeader(format!("unknown header key {key:?}")))?;
        if values[slot].is_some() {
            return Err(ProbeError::MalformedHeader(format!("duplicate header key {key}")));
        }
        let value = match value.strip_prefix(' ') {
            Some(v) => v,
            None if value.is_empty() => value,
            None => return Err(ProbeError::MalformedHeader(format!("expected space after {key}:"))),
        };
        values[slot] = Some(value);
    }
    let get = |i: usize| {
        values[i].ok_or_else(|| ProbeError::MalformedHeader(format!("missing header key {}", HEADER_KEYS[i])))
    };
    let ttl_raw = get(0)?;
    let path_raw = get(1)?;
    let len_raw = get(2)?;
    let flags_raw = get(3)?;
    let pair_raw = get(4)?;

    let probe_ttl = parse_number(KEY_TTL, ttl_raw)?;
    let path_id = parse_number(KEY_PATH_ID, path_raw)?;
    let payload_length = parse_number::<usize>(KEY_PAYLOAD_LENGTH, len_raw)?;
    let flags: ProbeFlags = flags_raw.parse()?;
    let pair: ProbePairId = pair_raw.parse()?;

    if flags.header_sec != matches!(pair, ProbePairId::Token(_)) {
        return Err(ProbeError::BadValue("HDRSEC flag disagrees with probe-pair id form".into()));
    }
    let expected_tag = if path_id == 0 { "DISCOVERY" } else { "PATHCHECK" };
    if kind_tag != expected_tag {
        return Err(ProbeError::BadValue(format!("message tag {kind_tag} disagrees with PATH-ID {path_id}")));
    }
    if payload_length != payload_section.len() {
        return Err(ProbeError::LengthMismatch { declared: payload_length, actual: payload_section.len() });
    }
    let payload = Payload::decode(payload_section, flags.payload_sec)?;
    if !flags.payload_append && payload.len() > 1 {
        return Err(ProbeError::BadValue("non-append probe carries more than one entry".into()));
    }
    Ok(ProbeMessage { header: ProbeHeader { probe_ttl, path_id, payload_length, flags, pair }, payload })
}

fn parse_number<T: FromStr>(key: &str, raw: &str) -> Result<T, ProbeError> {
    if raw.is_empty() || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ProbeError::BadValue(format!("{key} must be a non-negative integer, got {raw:?}")));
    }
    raw.parse().map_err(|_| ProbeError::BadValue(format!("{key} out of range: {raw}")))
}

/// Appends one hop entry to an append-mode probe.
pub fn append_entry(msg: &ProbeMessage, entry: PayloadEntry) -> Result<ProbeMessage, ProbeError> {
    if !msg.header.flags.payload_append {
        return Err(ProbeError::AppendOnNonAppendProbe);
    }
    let mut entries = match &msg.payload {
        Payload::Entries(e) => e.clone(),
        Payload::Sealed(_) => return Err(ProbeError::SealedPayload),
    };
    entries.push(entry);
    Ok(ProbeMessage::new(msg.header.clone(), Payload::Entries(entries)))
}

/// Appends one sealed hop segment to an append-mode probe.
pub fn append_segment(msg: &ProbeMessage, segment: SealedPayload) -> Result<ProbeMessage, ProbeError> {
    if !msg.header.flags.payload_append {
        return Err(ProbeError::AppendOnNonAppendProbe);
    }
    let mut segments = match &msg.payload {
        Payload::Sealed(s) => s.clone(),
        Payload::Entries(e) if e.is_empty() => Vec::new(),
        Payload::Entries(_) => return Err(ProbeError::BadValue("cannot mix sealed and clear entries".into())),
    };
    segments.push(segment);
    Ok(ProbeMessage::new(msg.header.clone(), Payload::Sealed(segments)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clear_pair() -> ProbePairId {
        ProbePairId::Clear { src: Ipv4Addr::new(10, 0, 1, 1), dst: Ipv4Addr::new(10, 0, 9, 1) }
    }

    fn append_flags() -> ProbeFlags {
        ProbeFlags { payload_append: true, ..Default::default() }
    }

    fn sample(entries: Vec<PayloadEntry>) -> ProbeMessage {
        ProbeMessage::new(ProbeHeader::discovery(append_flags(), clear_pair()), Payload::Entries(entries))
    }

    #[test]
    fn empty_payload_has_zero_length_line() {
        let bytes = encode_message(&sample(vec![]));
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.contains("\nPAYLOAD-LENGTH: 0\n"));
        assert_eq!(
            text,
            "TOPOMAN/1 DISCOVERY\nPROBE-TTL: 0\nPATH-ID: 0\nPAYLOAD-LENGTH: 0\nFLAGS: APPEND\n\
             PROBE-PAIR-ID: 10.0.1.1->10.0.9.1\n\n"
        );
    }

    #[test]
    fn payload_length_counts_entry_lines() {
        let entries = vec![
            PayloadEntry::source("mb1", "eth0"),
            PayloadEntry::transit("mb2", "eth1", OutInterface::Pending),
            PayloadEntry::terminal("mb3", "eth7"),
        ];
        // each line plus its newline, counted independently of the codec
        let expected: usize =
            ["device=mb1;in=NONE;out=eth0", "device=mb2;in=eth1;out=PENDING", "device=mb3;in=eth7;out=NONE"]
                .iter()
                .map(|l| l.len() + 1)
                .sum();
        let msg = sample(entries);
        assert_eq!(msg.header.payload_length, expected);
        let decoded = decode_message(&encode_message(&msg)).unwrap();
        assert_eq!(decoded, msg);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let mut text = String::from_utf8(encode_message(&sample(vec![PayloadEntry::source("mb1", "eth0")]))).unwrap();
        let actual = "device=mb1;in=NONE;out=eth0\n".len();
        text = text.replace(&format!("PAYLOAD-LENGTH: {actual}"), "PAYLOAD-LENGTH: 100");
        assert_eq!(decode_message(text.as_bytes()), Err(ProbeError::LengthMismatch { declared: 100, actual }));
    }

    #[test]
    fn missing_and_duplicate_keys() {
        let text = String::from_utf8(encode_message(&sample(vec![]))).unwrap();
        let truncated = text.replace("PATH-ID: 0\n", "");
        assert!(matches!(decode_message(truncated.as_bytes()), Err(ProbeError::MalformedHeader(_))));
        let dup = text.replace("PATH-ID: 0\n", "PATH-ID: 0\nPATH-ID: 0\n");
        assert!(matches!(decode_message(dup.as_bytes()), Err(ProbeError::MalformedHeader(_))));
        let unknown = text.replace("PATH-ID: 0\n", "PATH-ID: 0\nCOLOR: red\n");
        assert!(matches!(decode_message(unknown.as_bytes()), Err(ProbeError::MalformedHeader(_))));
    }

    #[test]
    fn non_numeric_ttl_is_bad_value() {
        let text = String::from_utf8(encode_message(&sample(vec![]))).unwrap();
        let bad = text.replace("PROBE-TTL: 0", "PROBE-TTL: three");
        assert!(matches!(decode_message(bad.as_bytes()), Err(ProbeError::BadValue(_))));
    }

    #[test]
    fn header_sec_requires_token_form() {
        let mut msg = sample(vec![]);
        msg.header.flags.header_sec = true;
        let text = String::from_utf8(encode_message(&msg)).unwrap();
        assert!(matches!(decode_message(text.as_bytes()), Err(ProbeError::BadValue(_))));
        msg.header.pair = ProbePairId::Token(0xdead_beef);
        let round = decode_message(&encode_message(&msg)).unwrap();
        assert_eq!(round.header.pair, ProbePairId::Token(0xdead_beef));
    }

    #[test]
    fn ttl_advances_until_threshold() {
        let mut h = ProbeHeader::discovery(ProbeFlags::default(), clear_pair());
        h.probe_ttl = 3;
        assert_eq!(advance_ttl(&h, 32).unwrap().probe_ttl, 4);
        h.probe_ttl = 31;
        assert_eq!(advance_ttl(&h, 32), None);
        h.probe_ttl = 0;
        assert_eq!(advance_ttl(&h, 1), None);
    }

    #[test]
    fn classification_depends_on_path_id() {
        let mut h = ProbeHeader::discovery(ProbeFlags::default(), clear_pair());
        assert_eq!(classify_probe(&h), ProbeKind::Discovery);
        assert_eq!(h.transport_port(), DISCOVERY_PORT);
        h.path_id = 7;
        assert_eq!(classify_probe(&h), ProbeKind::PathChecker);
        h.path_id = 1;
        assert_eq!(classify_probe(&h), ProbeKind::PathChecker);
        assert_eq!(h.transport_port(), PATH_CHECK_PORT_BASE + 1);
    }

    #[test]
    fn append_preserves_prefix() {
        let e1 = PayloadEntry::source("mb1", "eth0");
        let e2 = PayloadEntry::transit("mb3", "eth0", OutInterface::Named("eth1".into()));
        let one = append_entry(&sample(vec![]), e1.clone()).unwrap();
        assert_eq!(one.payload.len(), 1);
        assert!(one.header.payload_length > 0);
        let two = append_entry(&one, e2.clone()).unwrap();
        assert_eq!(two.entries().unwrap(), &[e1.clone(), e2][..]);
        let before = one.payload.encode();
        assert!(two.payload.encode().starts_with(&before));
    }

    #[test]
    fn append_rejected_without_flag() {
        let msg =
            ProbeMessage::new(ProbeHeader::discovery(ProbeFlags::default(), clear_pair()), Payload::Entries(vec![]));
        assert_eq!(append_entry(&msg, PayloadEntry::source("mb1", "eth0")), Err(ProbeError::AppendOnNonAppendProbe));
    }

    #[test]
    fn reserved_words_are_not_device_ids() {
        assert!(PayloadEntry::decode_line("device=NONE;in=NONE;out=eth0").is_err());
        assert!(PayloadEntry::decode_line("device=mb1;in=PENDING;out=eth0").is_err());
        assert!(PayloadEntry::decode_line("device=mb1;in=NONE").is_err());
    }
}
