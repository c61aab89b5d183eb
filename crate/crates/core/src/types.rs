//! Shared identifiers and request types.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crypto::{KeyPair, Keyring, Signature};
use crate::wire::{Reader, Wire, WireError, Writer};

/// All timestamps and durations are integer microseconds in one clock
/// domain (virtual in simulation, wall clock in a real cluster).
pub type Micros = u64;

pub const MS: Micros = 1_000;

/// Address of a process in the cluster. Serializes as `replica:0`,
/// `proxy:1`, `client:2` in configs and traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Replica(u32),
    Proxy(u32),
    Client(u32),
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl NodeId {
    pub fn to_bytes(self) -> [u8; 5] {
        let (role, idx) = match self {
            NodeId::Replica(i) => (0u8, i),
            NodeId::Proxy(i) => (1u8, i),
            NodeId::Client(i) => (2u8, i),
        };
        let mut out = [0u8; 5];
        out[0] = role;
        out[1..].copy_from_slice(&idx.to_le_bytes());
        out
    }

    pub fn replica_index(self) -> Option<u32> {
        match self {
            NodeId::Replica(i) => Some(i),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Replica(i) => write!(f, "replica:{i}"),
            NodeId::Proxy(i) => write!(f, "proxy:{i}"),
            NodeId::Client(i) => write!(f, "client:{i}"),
        }
    }
}

impl Wire for NodeId {
    fn encode(&self, w: &mut Writer) {
        let b = self.to_bytes();
        w.put_u8(b[0]);
        w.put_u32(u32::from_le_bytes(b[1..].try_into().unwrap()));
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let role = r.take_u8("node role")?;
        let idx = r.take_u32("node index")?;
        match role {
            0 => Ok(NodeId::Replica(idx)),
            1 => Ok(NodeId::Proxy(idx)),
            2 => Ok(NodeId::Client(idx)),
            _ => Err(WireError::Invalid("node role")),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    /// Parses `replica:0`, `proxy:1`, `client:2`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (role, idx) = s.split_once(':').ok_or_else(|| format!("bad node id `{s}`"))?;
        let idx: u32 = idx.parse().map_err(|_| format!("bad node index in `{s}`"))?;
        match role {
            "replica" => Ok(NodeId::Replica(idx)),
            "proxy" => Ok(NodeId::Proxy(idx)),
            "client" => Ok(NodeId::Client(idx)),
            _ => Err(format!("bad node role in `{s}`")),
        }
    }
}

/// A signed client operation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientRequest {
    pub client: NodeId,
    pub seq: u64,
    pub op: Vec<u8>,
    pub sig: Signature,
}

impl ClientRequest {
    /// Bytes covered by the client signature: (client, seq, op).
    pub fn signable(client: NodeId, seq: u64, op: &[u8]) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u8(b'c');
        client.encode(&mut w);
        w.put_u64(seq);
        w.put_bytes(op);
        w.into_vec()
    }

    pub fn new_signed(key: &KeyPair, seq: u64, op: Vec<u8>) -> Self {
        let sig = key.sign(&Self::signable(key.id(), seq, &op));
        ClientRequest { client: key.id(), seq, op, sig }
    }

    pub fn verify(&self, ring: &Keyring) -> bool {
        ring.verify(self.client, &Self::signable(self.client, self.seq, &self.op), &self.sig)
    }

    /// Canonical identity bytes fed into the log hash chain. The signature
    /// is excluded: two differently-signed copies of the same (client, seq,
    /// op) must chain identically.
    pub fn chain_bytes(&self) -> Vec<u8> {
        Self::signable(self.client, self.seq, &self.op)
    }
}

impl Wire for ClientRequest {
    fn encode(&self, w: &mut Writer) {
        self.client.encode(w);
        w.put_u64(self.seq);
        w.put_bytes(&self.op);
        self.sig.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(ClientRequest {
            client: NodeId::decode(r)?,
            seq: r.take_u64("request seq")?,
            op: r.take_bytes("request op")?,
            sig: Signature::decode(r)?,
        })
    }
}

/// A client request with the ETA and proxy attribution attached by the
/// sequencing layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StampedRequest {
    pub request: ClientRequest,
    pub eta: Micros,
    pub proxy: NodeId,
}

impl StampedRequest {
    /// Total order among released requests: ties on ETA break
    /// lexicographically on (proxy, client, seq).
    pub fn release_key(&self) -> (Micros, NodeId, NodeId, u64) {
        (self.eta, self.proxy, self.request.client, self.request.seq)
    }

    pub fn id(&self) -> (NodeId, u64) {
        (self.request.client, self.request.seq)
    }
}

impl Wire for StampedRequest {
    fn encode(&self, w: &mut Writer) {
        self.request.encode(w);
        w.put_u64(self.eta);
        self.proxy.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(StampedRequest {
            request: ClientRequest::decode(r)?,
            eta: r.take_u64("eta")?,
            proxy: NodeId::decode(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoMode;

    #[test]
    fn node_id_parse_display() {
        for s in ["replica:0", "proxy:3", "client:12"] {
            let id: NodeId = s.parse().unwrap();
            assert_eq!(id.to_string(), s);
        }
        assert!("widget:1".parse::<NodeId>().is_err());
        assert!("replica".parse::<NodeId>().is_err());
    }

    #[test]
    fn request_signature_covers_fields() {
        let key = KeyPair::from_seed(CryptoMode::Ed25519, NodeId::Client(1), 5);
        let mut ring = Keyring::new(CryptoMode::Ed25519);
        ring.register(&key);
        let req = ClientRequest::new_signed(&key, 0, b"op".to_vec());
        assert!(req.verify(&ring));
        let mut tampered = req.clone();
        tampered.op = b"oq".to_vec();
        assert!(!tampered.verify(&ring));
    }

    #[test]
    fn release_key_orders_by_eta_then_ids() {
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Client(1), 5);
        let mk = |eta, proxy, seq| StampedRequest {
            request: ClientRequest::new_signed(&key, seq, vec![]),
            eta,
            proxy: NodeId::Proxy(proxy),
        };
        assert!(mk(5, 0, 0).release_key() < mk(6, 0, 0).release_key());
        assert!(mk(5, 0, 9).release_key() < mk(5, 1, 0).release_key());
        assert!(mk(5, 1, 0).release_key() < mk(5, 1, 1).release_key());
    }
}
