//! Pluggable digests and signatures.
//!
//! Two modes share one interface: `Ed25519` pairs real ed25519 signatures
//! with SHA-256 digests, while `Null` uses 8-byte non-cryptographic digests
//! and empty always-valid signatures so large simulations stay cheap. The
//! protocol logic is identical under both.

use std::collections::BTreeMap;
use std::fmt;

use ed25519_dalek::{Signer as _, SigningKey, Verifier as _, VerifyingKey};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::types::NodeId;
use crate::wire::{Reader, Wire, WireError, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CryptoMode {
    /// No-op signatures, 8-byte FNV-1a digests. For simulation speed.
    Null,
    /// ed25519 signatures, SHA-256 digests.
    Ed25519,
}

impl CryptoMode {
    pub fn digest_len(self) -> usize {
        match self {
            CryptoMode::Null => 8,
            CryptoMode::Ed25519 => 32,
        }
    }

    pub fn signature_len(self) -> usize {
        match self {
            CryptoMode::Null => 0,
            CryptoMode::Ed25519 => 64,
        }
    }
}

#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashDigest(pub Vec<u8>);

impl HashDigest {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() % 2 != 0 {
            return None;
        }
        let mut out = Vec::with_capacity(s.len() / 2);
        for i in (0..s.len()).step_by(2) {
            out.push(u8::from_str_radix(s.get(i..i + 2)?, 16).ok()?);
        }
        Some(HashDigest(out))
    }

    pub fn short_hex(&self) -> String {
        self.0.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

impl serde::Serialize for HashDigest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> serde::Deserialize<'de> for HashDigest {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        HashDigest::from_hex(&s).ok_or_else(|| serde::de::Error::custom("bad hex digest"))
    }
}

impl fmt::Debug for HashDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H({})", self.short_hex())
    }
}

impl Wire for HashDigest {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(HashDigest(r.take_bytes("digest")?))
    }
}

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature(pub Vec<u8>);

impl Signature {
    pub fn empty() -> Self {
        Signature(Vec::new())
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sig[{}B]", self.0.len())
    }
}

impl Wire for Signature {
    fn encode(&self, w: &mut Writer) {
        w.put_bytes(&self.0);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Signature(r.take_bytes("signature")?))
    }
}

fn fnv1a64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Digest of arbitrary bytes under the given mode.
pub fn digest(mode: CryptoMode, data: &[u8]) -> HashDigest {
    match mode {
        CryptoMode::Null => HashDigest(fnv1a64(data).to_le_bytes().to_vec()),
        CryptoMode::Ed25519 => HashDigest(Sha256::digest(data).to_vec()),
    }
}

/// The hash-chain base H(-1): digest of the empty byte string.
pub fn chain_base(mode: CryptoMode) -> HashDigest {
    digest(mode, b"")
}

/// Per-node signing handle.
#[derive(Clone)]
pub struct KeyPair {
    mode: CryptoMode,
    id: NodeId,
    key: Option<SigningKey>,
}

impl KeyPair {
    /// Deterministically derive a key pair from a master seed and node id;
    /// the whole cluster's key material is a pure function of one u64.
    pub fn from_seed(mode: CryptoMode, id: NodeId, master_seed: u64) -> Self {
        let key = match mode {
            CryptoMode::Null => None,
            CryptoMode::Ed25519 => {
                let mut h = Sha256::new();
                h.update(master_seed.to_le_bytes());
                h.update(id.to_bytes());
                let seed: [u8; 32] = h.finalize().into();
                Some(SigningKey::from_bytes(&seed))
            }
        };
        Self { mode, id, key }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn mode(&self) -> CryptoMode {
        self.mode
    }

    pub fn public(&self) -> Option<VerifyingKey> {
        self.key.as_ref().map(|k| k.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> Signature {
        match (&self.key, self.mode) {
            (Some(k), CryptoMode::Ed25519) => Signature(k.sign(msg).to_bytes().to_vec()),
            _ => Signature::empty(),
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({:?}, {})", self.mode, self.id)
    }
}

/// Shared registry of verifying keys for the whole cluster.
#[derive(Clone, Debug)]
pub struct Keyring {
    mode: CryptoMode,
    keys: BTreeMap<NodeId, VerifyingKey>,
}

impl Keyring {
    pub fn new(mode: CryptoMode) -> Self {
        Self { mode, keys: BTreeMap::new() }
    }

    pub fn mode(&self) -> CryptoMode {
        self.mode
    }

    pub fn register(&mut self, pair: &KeyPair) {
        if let Some(pk) = pair.public() {
            self.keys.insert(pair.id(), pk);
        }
    }

    /// Verify `sig` over `msg` by the claimed signer. Unknown ids fail
    /// verification rather than panic.
    pub fn verify(&self, signer: NodeId, msg: &[u8], sig: &Signature) -> bool {
        match self.mode {
            CryptoMode::Null => true,
            CryptoMode::Ed25519 => {
                let Some(pk) = self.keys.get(&signer) else {
                    return false;
                };
                let Ok(bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
                    return false;
                };
                pk.verify(msg, &ed25519_dalek::Signature::from_bytes(&bytes)).is_ok()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring_with(mode: CryptoMode, ids: &[NodeId]) -> (Vec<KeyPair>, Keyring) {
        let pairs: Vec<_> = ids.iter().map(|&id| KeyPair::from_seed(mode, id, 7)).collect();
        let mut ring = Keyring::new(mode);
        for p in &pairs {
            ring.register(p);
        }
        (pairs, ring)
    }

    #[test]
    fn sign_verify_roundtrip() {
        let a = NodeId::Replica(0);
        let (pairs, ring) = ring_with(CryptoMode::Ed25519, &[a]);
        let sig = pairs[0].sign(b"message");
        assert!(ring.verify(a, b"message", &sig));
    }

    #[test]
    fn altered_bytes_rejected() {
        let a = NodeId::Replica(0);
        let (pairs, ring) = ring_with(CryptoMode::Ed25519, &[a]);
        let sig = pairs[0].sign(b"message");
        assert!(!ring.verify(a, b"messagE", &sig));
    }

    #[test]
    fn unknown_signer_fails_not_crashes() {
        let a = NodeId::Replica(0);
        let (pairs, ring) = ring_with(CryptoMode::Ed25519, &[a]);
        let sig = pairs[0].sign(b"m");
        assert!(!ring.verify(NodeId::Replica(9), b"m", &sig));
    }

    #[test]
    fn null_mode_always_verifies() {
        let a = NodeId::Replica(0);
        let (pairs, ring) = ring_with(CryptoMode::Null, &[a]);
        let sig = pairs[0].sign(b"m");
        assert_eq!(sig, Signature::empty());
        assert!(ring.verify(a, b"anything", &sig));
        assert!(ring.verify(NodeId::Client(3), b"anything", &Signature::empty()));
    }

    #[test]
    fn digest_lengths_match_mode() {
        assert_eq!(digest(CryptoMode::Null, b"x").0.len(), CryptoMode::Null.digest_len());
        assert_eq!(digest(CryptoMode::Ed25519, b"x").0.len(), CryptoMode::Ed25519.digest_len());
    }

    #[test]
    fn key_derivation_is_deterministic() {
        let a = KeyPair::from_seed(CryptoMode::Ed25519, NodeId::Replica(2), 99);
        let b = KeyPair::from_seed(CryptoMode::Ed25519, NodeId::Replica(2), 99);
        assert_eq!(a.sign(b"x"), b.sign(b"x"));
        let c = KeyPair::from_seed(CryptoMode::Ed25519, NodeId::Replica(3), 99);
        assert_ne!(a.sign(b"x"), c.sign(b"x"));
    }
}
