//! Probe payload sealing and probe-pair identity tokens.
//!
//! Sealing a payload:
//!
//! 1. draw a fresh 256-bit symmetric key and a 128-bit nonce, encrypt the
//!    plaintext with AES-256-CTR (`ciphertext = nonce || keystream ^ plaintext`);
//! 2. digest the canonical authenticated header lines followed by the
//!    ciphertext with SHA-256;
//! 3. seal `key || digest` to the controller public key;
//! 4. ship the wrapped blob next to the ciphertext.
//!
//! Intermediate agents never hold the private key, so in append mode every hop
//! contributes its own sealed segment and the controller opens all of them.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;

use aes::cipher::{KeyIvInit, StreamCipher};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use crypto_box::{PublicKey, SecretKey};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::probe::{flags_line, pair_line, ProbeError, ProbeFlags, ProbeHeader, ProbePairId};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

const SYM_KEY_LEN: usize = 32;
const NONCE_LEN: usize = 16;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SecurityError {
    #[error("wrapped key blob cannot be opened with this private key")]
    DecryptError,
    #[error("integrity digest mismatch")]
    IntegrityError,
    #[error("unknown or expired probe id token 0x{0:016x}")]
    UnknownToken(u64),
}

/// Controller key pair; the public half is distributed to every agent.
#[derive(Clone)]
pub struct ControllerKeyPair {
    public: PublicKey,
    private: SecretKey,
}

impl ControllerKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let private = SecretKey::generate(rng);
        ControllerKeyPair { public: private.public_key(), private }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn private_key(&self) -> &SecretKey {
        &self.private
    }
}

impl fmt::Debug for ControllerKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControllerKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// The header subset bound into the payload digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuthenticatedHeaderFields {
    pub probe_pair_id: ProbePairId,
    pub flag_header_sec: bool,
    pub flag_payload_sec: bool,
    pub flag_payload_append: bool,
}

impl AuthenticatedHeaderFields {
    pub fn new(pair: ProbePairId, flags: ProbeFlags) -> Self {
        AuthenticatedHeaderFields {
            probe_pair_id: pair,
            flag_header_sec: flags.header_sec,
            flag_payload_sec: flags.payload_sec,
            flag_payload_append: flags.payload_append,
        }
    }

    pub fn from_header(header: &ProbeHeader) -> Self {
        Self::new(header.pair, header.flags)
    }

    /// Same lines the probe header uses for these fields, `FLAGS` first.
    pub fn canonical(&self) -> String {
        let flags = ProbeFlags {
            payload_append: self.flag_payload_append,
            header_sec: self.flag_header_sec,
            payload_sec: self.flag_payload_sec,
        };
        let mut out = flags_line(&flags);
        out.push_str(&pair_line(&self.probe_pair_id));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedPayload {
    pub wrapped_blob: Vec<u8>,
    /// Nonce followed by the AES-256-CTR ciphertext.
    pub ciphertext: Vec<u8>,
}

impl SealedPayload {
    pub fn encode_line(&self) -> String {
        format!("seg={}:{}", B64.encode(&self.wrapped_blob), B64.encode(&self.ciphertext))
    }

    pub fn decode_line(line: &str) -> Result<Self, ProbeError> {
        let body = line
            .strip_prefix("seg=")
            .ok_or_else(|| ProbeError::BadValue(format!("expected sealed segment, got {line:?}")))?;
        let (wrapped, ct) =
            body.split_once(':').ok_or_else(|| ProbeError::BadValue("sealed segment missing ':'".into()))?;
        let decode = |s: &str| B64.decode(s).map_err(|e| ProbeError::BadValue(format!("bad base64: {e}")));
        Ok(SealedPayload { wrapped_blob: decode(wrapped)?, ciphertext: decode(ct)? })
    }
}

fn digest(hdr: &AuthenticatedHeaderFields, ciphertext: &[u8]) -> [u8; DIGEST_LEN] {
    let mut h = Sha256::new();
    h.update(hdr.canonical().as_bytes());
    h.update(ciphertext);
    h.finalize().into()
}

pub fn seal_payload<R: RngCore + CryptoRng>(
    plaintext: &[u8],
    hdr: &AuthenticatedHeaderFields,
    public: &PublicKey,
    rng: &mut R,
) -> SealedPayload {
    let mut key = [0u8; SYM_KEY_LEN];
    rng.fill_bytes(&mut key);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);

    let mut ciphertext = Vec::with_capacity(NONCE_LEN + plaintext.len());
    ciphertext.extend_from_slice(&nonce);
    ciphertext.extend_from_slice(plaintext);
    Aes256Ctr::new(&key.into(), &nonce.into()).apply_keystream(&mut ciphertext[NONCE_LEN..]);

    let mut inner = Vec::with_capacity(SYM_KEY_LEN + DIGEST_LEN);
    inner.extend_from_slice(&key);
    inner.extend_from_slice(&digest(hdr, &ciphertext));
    let wrapped_blob = public.seal(rng, &inner).expect("sealing a fixed-size blob cannot fail");

    SealedPayload { wrapped_blob, ciphertext }
}

pub fn open_payload(
    sealed: &SealedPayload,
    hdr: &AuthenticatedHeaderFields,
    private: &SecretKey,
) -> Result<Vec<u8>, SecurityError> {
    let inner = private.unseal(&sealed.wrapped_blob).map_err(|_| SecurityError::DecryptError)?;
    if inner.len() != SYM_KEY_LEN + DIGEST_LEN {
        return Err(SecurityError::DecryptError);
    }
    let (key, expected) = inner.split_at(SYM_KEY_LEN);
    if sealed.ciphertext.len() < NONCE_LEN {
        return Err(SecurityError::IntegrityError);
    }
    let actual = digest(hdr, &sealed.ciphertext);
    // constant-time comparison
    let diff = actual.iter().zip(expected).fold(0u8, |acc, (a, b)| acc | (a ^ b));
    if diff != 0 {
        return Err(SecurityError::IntegrityError);
    }
    let (nonce, body) = sealed.ciphertext.split_at(NONCE_LEN);
    let key: [u8; SYM_KEY_LEN] = key.try_into().expect("length checked");
    let nonce: [u8; NONCE_LEN] = nonce.try_into().expect("length checked");
    let mut plaintext = body.to_vec();
    Aes256Ctr::new(&key.into(), &nonce.into()).apply_keystream(&mut plaintext);
    Ok(plaintext)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProbeIdToken(pub u64);

#[derive(Debug, Clone)]
struct TokenEntry {
    pair: (Ipv4Addr, Ipv4Addr),
    expires_at: u64,
}

/// Controller-side token table. Mutation must be serialized; lookups only
/// need `&self`.
#[derive(Debug, Clone)]
pub struct TokenRegistry {
    live: HashMap<u64, TokenEntry>,
    validity: u64,
    collisions: u64,
}

impl TokenRegistry {
    /// `validity` is the lifetime of a mapping in simulated ticks.
    pub fn new(validity: u64) -> Self {
        TokenRegistry { live: HashMap::new(), validity, collisions: 0 }
    }

    pub fn issue<R: RngCore>(&mut self, pair: (Ipv4Addr, Ipv4Addr), now: u64, rng: &mut R) -> ProbeIdToken {
        self.expire(now);
        loop {
            let candidate = rng.next_u64();
            if self.live.contains_key(&candidate) {
                self.collisions += 1;
                continue;
            }
            self.live.insert(candidate, TokenEntry { pair, expires_at: now.saturating_add(self.validity) });
            return ProbeIdToken(candidate);
        }
    }

    pub fn resolve(&self, token: ProbeIdToken, now: u64) -> Result<(Ipv4Addr, Ipv4Addr), SecurityError> {
        match self.live.get(&token.0) {
            Some(entry) if now < entry.expires_at => Ok(entry.pair),
            _ => Err(SecurityError::UnknownToken(token.0)),
        }
    }

    /// Drops mappings whose window has lapsed.
    pub fn expire(&mut self, now: u64) {
        self.live.retain(|_, e| now < e.expires_at);
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn collisions(&self) -> u64 {
        self.collisions
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hdr() -> AuthenticatedHeaderFields {
        AuthenticatedHeaderFields {
            probe_pair_id: ProbePairId::Clear { src: Ipv4Addr::new(10, 0, 0, 1), dst: Ipv4Addr::new(10, 0, 0, 9) },
            flag_header_sec: false,
            flag_payload_sec: true,
            flag_payload_append: true,
        }
    }

    #[test]
    fn seal_open_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let keys = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"device=mb1;in=NONE;out=eth0", &hdr(), keys.public_key(), &mut rng);
        assert_eq!(open_payload(&sealed, &hdr(), keys.private_key()).unwrap(), b"device=mb1;in=NONE;out=eth0");
    }

    #[test]
    fn empty_plaintext() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let keys = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"", &hdr(), keys.public_key(), &mut rng);
        assert_eq!(sealed.ciphertext.len(), NONCE_LEN);
        assert!(open_payload(&sealed, &hdr(), keys.private_key()).unwrap().is_empty());
    }

    #[test]
    fn fresh_key_and_nonce_per_seal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = ControllerKeyPair::generate(&mut rng);
        let a = seal_payload(b"same bytes", &hdr(), keys.public_key(), &mut rng);
        let b = seal_payload(b"same bytes", &hdr(), keys.public_key(), &mut rng);
        assert_ne!(a.ciphertext, b.ciphertext);
        assert_ne!(a.wrapped_blob, b.wrapped_blob);
    }

    #[test]
    fn header_flag_change_breaks_integrity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let keys = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"payload", &hdr(), keys.public_key(), &mut rng);
        let mut changed = hdr();
        changed.flag_payload_append = false;
        assert_eq!(open_payload(&sealed, &changed, keys.private_key()), Err(SecurityError::IntegrityError));
    }

    #[test]
    fn wrong_private_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = ControllerKeyPair::generate(&mut rng);
        let other = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"payload", &hdr(), keys.public_key(), &mut rng);
        assert_eq!(open_payload(&sealed, &hdr(), other.private_key()), Err(SecurityError::DecryptError));
    }

    #[test]
    fn every_ciphertext_bit_flip_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let keys = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"short message", &hdr(), keys.public_key(), &mut rng);
        for bit in 0..sealed.ciphertext.len() * 8 {
            let mut t = sealed.clone();
            t.ciphertext[bit / 8] ^= 1 << (bit % 8);
            assert_eq!(open_payload(&t, &hdr(), keys.private_key()), Err(SecurityError::IntegrityError), "bit {bit}");
        }
    }

    #[test]
    fn segment_line_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys = ControllerKeyPair::generate(&mut rng);
        let sealed = seal_payload(b"x", &hdr(), keys.public_key(), &mut rng);
        assert_eq!(SealedPayload::decode_line(&sealed.encode_line()).unwrap(), sealed);
    }

    /// Yields a scripted sequence of u64 values.
    struct ScriptedRng(Vec<u64>);

    impl RngCore for ScriptedRng {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0.remove(0)
        }
        fn fill_bytes(&mut self, dest: &mut [u8]) {
            for chunk in dest.chunks_mut(8) {
                let v = self.next_u64().to_le_bytes();
                chunk.copy_from_slice(&v[..chunk.len()]);
            }
        }
        fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
            self.fill_bytes(dest);
            Ok(())
        }
    }

    fn pair(a: u8, b: u8) -> (Ipv4Addr, Ipv4Addr) {
        (Ipv4Addr::new(10, 0, 0, a), Ipv4Addr::new(10, 0, 0, b))
    }

    #[test]
    fn colliding_rng_retries() {
        let mut reg = TokenRegistry::new(100);
        let mut rng = ScriptedRng(vec![42, 42, 43]);
        let t1 = reg.issue(pair(1, 2), 0, &mut rng);
        let t2 = reg.issue(pair(3, 4), 0, &mut rng);
        assert_eq!(t1, ProbeIdToken(42));
        assert_eq!(t2, ProbeIdToken(43));
        assert_eq!(reg.collisions(), 1);
        assert_eq!(reg.resolve(t1, 1).unwrap(), pair(1, 2));
        assert_eq!(reg.resolve(t2, 1).unwrap(), pair(3, 4));
    }

    #[test]
    fn tokens_expire_after_window() {
        let mut reg = TokenRegistry::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = reg.issue(pair(1, 2), 5, &mut rng);
        assert_eq!(reg.resolve(t, 14).unwrap(), pair(1, 2));
        assert_eq!(reg.resolve(t, 15), Err(SecurityError::UnknownToken(t.0)));
        reg.expire(15);
        assert_eq!(reg.live_count(), 0);
    }

    #[test]
    fn never_issued_token_is_unknown() {
        let mut reg = TokenRegistry::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let issued: Vec<_> = (0..8).map(|i| reg.issue(pair(i, i + 1), 0, &mut rng)).collect();
        let probe = (0..u64::MAX).find(|v| !issued.iter().any(|t| t.0 == *v)).unwrap();
        assert!(matches!(reg.resolve(ProbeIdToken(probe), 0), Err(SecurityError::UnknownToken(_))));
    }
}
