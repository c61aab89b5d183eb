//! Protocol messages and the signed envelope that carries them.
//!
//! Every message is encoded as `tag byte + payload fields in declaration
//! order + sender + signature`; frames on a byte transport carry a u32
//! length prefix. The signature covers everything before it, so envelopes
//! embedded inside proof messages stay independently verifiable.
//!
//! `StateRequest`, `TimeoutProof` and `ConflictProof` travel unsigned: the
//! first is answered with self-certifying data and the other two carry
//! their own signed constituents.

use crate::crypto::{HashDigest, KeyPair, Keyring, Signature};
use crate::types::{Micros, NodeId, StampedRequest};
use crate::wire::{decode_option, decode_vec, encode_option, encode_vec, Reader, Wire, WireError, Writer};

/// One entry of a repair `LOG` message: enough to identify a request and
/// its position in the sender's hash chain without shipping op bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntryId {
    /// Chained log digest H(k) at this entry.
    pub digest: HashDigest,
    pub client: NodeId,
    pub seq: u64,
    /// Digest of the operation bytes.
    pub op_digest: HashDigest,
}

impl LogEntryId {
    pub fn rid(&self) -> RequestId {
        RequestId { client: self.client, seq: self.seq, op_digest: self.op_digest.clone() }
    }
}

impl Wire for LogEntryId {
    fn encode(&self, w: &mut Writer) {
        self.digest.encode(w);
        self.client.encode(w);
        w.put_u64(self.seq);
        self.op_digest.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(LogEntryId {
            digest: HashDigest::decode(r)?,
            client: NodeId::decode(r)?,
            seq: r.take_u64("log entry seq")?,
            op_digest: HashDigest::decode(r)?,
        })
    }
}

/// Identity of a request independent of log position.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RequestId {
    pub client: NodeId,
    pub seq: u64,
    pub op_digest: HashDigest,
}

impl Wire for RequestId {
    fn encode(&self, w: &mut Writer) {
        self.client.encode(w);
        w.put_u64(self.seq);
        self.op_digest.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(RequestId {
            client: NodeId::decode(r)?,
            seq: r.take_u64("rid seq")?,
            op_digest: HashDigest::decode(r)?,
        })
    }
}

/// Prepared-history certificate carried in a VIEW-CHANGE: the proposal it
/// certifies plus n-f matching REPAIR-PREPARE envelopes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrepareCert {
    pub view: u64,
    pub history_digest: HashDigest,
    pub history: Box<Envelope>,
    pub prepares: Vec<Envelope>,
}

impl Wire for PrepareCert {
    fn encode(&self, w: &mut Writer) {
        w.put_u64(self.view);
        self.history_digest.encode(w);
        self.history.encode(w);
        encode_vec(&self.prepares, w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(PrepareCert {
            view: r.take_u64("cert view")?,
            history_digest: HashDigest::decode(r)?,
            history: Box::new(Envelope::decode(r)?),
            prepares: decode_vec(r, "cert prepares")?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Client -> proxy.
    Request { request: crate::types::ClientRequest },
    /// Proxy -> replicas: the request plus its ETA stamp.
    Stamped { stamped: StampedRequest },
    /// Replica -> client after speculative execution.
    SpecReply {
        round: u64,
        client: NodeId,
        seq: u64,
        index: u64,
        digest: HashDigest,
        result: Vec<u8>,
    },
    /// Periodic log synchronization broadcast.
    Sync { round: u64, index: i64, digest: HashDigest, eta_star: Micros, app_digest: HashDigest },
    /// Announcement of an installed checkpoint.
    Checkpoint { round: u64, index: i64, digest: HashDigest, app_digest: HashDigest },
    Timeout { round: u64, index: i64 },
    /// f+1 signed TIMEOUTs for the same (round, index).
    TimeoutProof { round: u64, index: i64, timeouts: Vec<Envelope> },
    /// A set of SYNCs proving no checkpoint can form at an index.
    ConflictProof { round: u64, index: i64, syncs: Vec<Envelope> },
    /// Ask a checkpoint holder for its snapshot.
    StateRequest { index: i64 },
    /// Checkpoint snapshot plus the n-p SYNCs proving it.
    StateReply { index: i64, snapshot: Vec<u8>, proof: Vec<Envelope> },
    /// Uncommitted log summary sent to the repair leader.
    Log {
        view: u64,
        round: u64,
        base_index: i64,
        base_digest: HashDigest,
        /// Checkpoint proof justifying the base when it lies beyond the
        /// round boundary; empty when base_index == startIdx - 1.
        base_proof: Vec<Envelope>,
        eta_star: Micros,
        entries: Vec<LogEntryId>,
    },
    /// Leader's proposal: n-f LOG messages (plus view-change justification
    /// when proposed by a new leader after a view change).
    RepairHistory { round: u64, view: u64, logs: Vec<Envelope>, view_change_proof: Vec<Envelope> },
    RepairPrepare { round: u64, view: u64, history_digest: HashDigest },
    RepairCommit { round: u64, view: u64, history_digest: HashDigest },
    RepairDone { round: u64, view: u64, log_len: u64, history_digest: HashDigest },
    /// Replica -> client after a request commits through repair.
    CommittedReply { round: u64, client: NodeId, seq: u64, result: Vec<u8> },
    ViewChange {
        round: u64,
        new_view: u64,
        prepared: Option<PrepareCert>,
        /// The sender's original LOG message for this round.
        log: Box<Envelope>,
    },
    /// Sequencing-layer delay probe and its echo.
    Probe { send_ts: Micros },
    ProbeReply { send_ts: Micros, recv_ts: Micros },
    /// Ask a replica that finished round `round` for the committed history.
    HistoryFetch { round: u64 },
    /// Ask for full request bodies listed in a committed history.
    RepairFetch { round: u64, needs: Vec<RequestId> },
    RepairFetchReply { round: u64, requests: Vec<StampedRequest> },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Request { .. } => 0,
            Message::SpecReply { .. } => 1,
            Message::Sync { .. } => 2,
            Message::Checkpoint { .. } => 3,
            Message::Timeout { .. } => 4,
            Message::TimeoutProof { .. } => 5,
            Message::ConflictProof { .. } => 6,
            Message::StateRequest { .. } => 7,
            Message::StateReply { .. } => 8,
            Message::Log { .. } => 9,
            Message::RepairHistory { .. } => 10,
            Message::RepairPrepare { .. } => 11,
            Message::RepairCommit { .. } => 12,
            Message::RepairDone { .. } => 13,
            Message::CommittedReply { .. } => 14,
            Message::ViewChange { .. } => 15,
            Message::Stamped { .. } => 16,
            Message::Probe { .. } => 17,
            Message::ProbeReply { .. } => 18,
            Message::HistoryFetch { .. } => 19,
            Message::RepairFetch { .. } => 20,
            Message::RepairFetchReply { .. } => 21,
        }
    }

    pub fn tag_name(&self) -> &'static str {
        match self {
            Message::Request { .. } => "REQUEST",
            Message::SpecReply { .. } => "SPEC-REPLY",
            Message::Sync { .. } => "SYNC",
            Message::Checkpoint { .. } => "CHECKPOINT",
            Message::Timeout { .. } => "TIMEOUT",
            Message::TimeoutProof { .. } => "TIMEOUT-PROOF",
            Message::ConflictProof { .. } => "CONFLICT-PROOF",
            Message::StateRequest { .. } => "STATE-REQUEST",
            Message::StateReply { .. } => "STATE-REPLY",
            Message::Log { .. } => "LOG",
            Message::RepairHistory { .. } => "REPAIR-HISTORY",
            Message::RepairPrepare { .. } => "REPAIR-PREPARE",
            Message::RepairCommit { .. } => "REPAIR-COMMIT",
            Message::RepairDone { .. } => "REPAIR-DONE",
            Message::CommittedReply { .. } => "COMMITTED-REPLY",
            Message::ViewChange { .. } => "VIEW-CHANGE",
            Message::Stamped { .. } => "STAMPED-REQUEST",
            Message::Probe { .. } => "PROBE",
            Message::ProbeReply { .. } => "PROBE-REPLY",
            Message::HistoryFetch { .. } => "HISTORY-FETCH",
            Message::RepairFetch { .. } => "REPAIR-FETCH",
            Message::RepairFetchReply { .. } => "REPAIR-FETCH-REPLY",
        }
    }

    /// Messages that are self-certifying or answered with self-certifying
    /// data need no envelope signature.
    pub fn requires_signature(&self) -> bool {
        !matches!(
            self,
            Message::StateRequest { .. }
                | Message::TimeoutProof { .. }
                | Message::ConflictProof { .. }
                | Message::Probe { .. }
                | Message::HistoryFetch { .. }
                | Message::RepairFetch { .. }
        )
    }
}

impl Wire for Message {
    fn encode(&self, w: &mut Writer) {
        w.put_u8(self.tag());
        match self {
            Message::Request { request } => request.encode(w),
            Message::Stamped { stamped } => stamped.encode(w),
            Message::SpecReply { round, client, seq, index, digest, result } => {
                w.put_u64(*round);
                client.encode(w);
                w.put_u64(*seq);
                w.put_u64(*index);
                digest.encode(w);
                w.put_bytes(result);
            }
            Message::Sync { round, index, digest, eta_star, app_digest } => {
                w.put_u64(*round);
                w.put_i64(*index);
                digest.encode(w);
                w.put_u64(*eta_star);
                app_digest.encode(w);
            }
            Message::Checkpoint { round, index, digest, app_digest } => {
                w.put_u64(*round);
                w.put_i64(*index);
                digest.encode(w);
                app_digest.encode(w);
            }
            Message::Timeout { round, index } => {
                w.put_u64(*round);
                w.put_i64(*index);
            }
            Message::TimeoutProof { round, index, timeouts } => {
                w.put_u64(*round);
                w.put_i64(*index);
                encode_vec(timeouts, w);
            }
            Message::ConflictProof { round, index, syncs } => {
                w.put_u64(*round);
                w.put_i64(*index);
                encode_vec(syncs, w);
            }
            Message::StateRequest { index } => w.put_i64(*index),
            Message::StateReply { index, snapshot, proof } => {
                w.put_i64(*index);
                w.put_bytes(snapshot);
                encode_vec(proof, w);
            }
            Message::Log { view, round, base_index, base_digest, base_proof, eta_star, entries } => {
                w.put_u64(*view);
                w.put_u64(*round);
                w.put_i64(*base_index);
                base_digest.encode(w);
                encode_vec(base_proof, w);
                w.put_u64(*eta_star);
                encode_vec(entries, w);
            }
            Message::RepairHistory { round, view, logs, view_change_proof } => {
                w.put_u64(*round);
                w.put_u64(*view);
                encode_vec(logs, w);
                encode_vec(view_change_proof, w);
            }
            Message::RepairPrepare { round, view, history_digest }
            | Message::RepairCommit { round, view, history_digest } => {
                w.put_u64(*round);
                w.put_u64(*view);
                history_digest.encode(w);
            }
            Message::RepairDone { round, view, log_len, history_digest } => {
                w.put_u64(*round);
                w.put_u64(*view);
                w.put_u64(*log_len);
                history_digest.encode(w);
            }
            Message::CommittedReply { round, client, seq, result } => {
                w.put_u64(*round);
                client.encode(w);
                w.put_u64(*seq);
                w.put_bytes(result);
            }
            Message::ViewChange { round, new_view, prepared, log } => {
                w.put_u64(*round);
                w.put_u64(*new_view);
                encode_option(prepared, w);
                log.encode(w);
            }
            Message::Probe { send_ts } => w.put_u64(*send_ts),
            Message::ProbeReply { send_ts, recv_ts } => {
                w.put_u64(*send_ts);
                w.put_u64(*recv_ts);
            }
            Message::HistoryFetch { round } => w.put_u64(*round),
            Message::RepairFetch { round, needs } => {
                w.put_u64(*round);
                encode_vec(needs, w);
            }
            Message::RepairFetchReply { round, requests } => {
                w.put_u64(*round);
                encode_vec(requests, w);
            }
        }
    }

    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        let tag = r.take_u8("message tag")?;
        Ok(match tag {
            0 => Message::Request { request: crate::types::ClientRequest::decode(r)? },
            1 => Message::SpecReply {
                round: r.take_u64("round")?,
                client: NodeId::decode(r)?,
                seq: r.take_u64("seq")?,
                index: r.take_u64("index")?,
                digest: HashDigest::decode(r)?,
                result: r.take_bytes("result")?,
            },
            2 => Message::Sync {
                round: r.take_u64("round")?,
                index: r.take_i64("index")?,
                digest: HashDigest::decode(r)?,
                eta_star: r.take_u64("eta_star")?,
                app_digest: HashDigest::decode(r)?,
            },
            3 => Message::Checkpoint {
                round: r.take_u64("round")?,
                index: r.take_i64("index")?,
                digest: HashDigest::decode(r)?,
                app_digest: HashDigest::decode(r)?,
            },
            4 => Message::Timeout { round: r.take_u64("round")?, index: r.take_i64("index")? },
            5 => Message::TimeoutProof {
                round: r.take_u64("round")?,
                index: r.take_i64("index")?,
                timeouts: decode_vec(r, "timeouts")?,
            },
            6 => Message::ConflictProof {
                round: r.take_u64("round")?,
                index: r.take_i64("index")?,
                syncs: decode_vec(r, "syncs")?,
            },
            7 => Message::StateRequest { index: r.take_i64("index")? },
            8 => Message::StateReply {
                index: r.take_i64("index")?,
                snapshot: r.take_bytes("snapshot")?,
                proof: decode_vec(r, "proof")?,
            },
            9 => Message::Log {
                view: r.take_u64("view")?,
                round: r.take_u64("round")?,
                base_index: r.take_i64("base_index")?,
                base_digest: HashDigest::decode(r)?,
                base_proof: decode_vec(r, "base_proof")?,
                eta_star: r.take_u64("eta_star")?,
                entries: decode_vec(r, "entries")?,
            },
            10 => Message::RepairHistory {
                round: r.take_u64("round")?,
                view: r.take_u64("view")?,
                logs: decode_vec(r, "logs")?,
                view_change_proof: decode_vec(r, "vc proof")?,
            },
            11 => Message::RepairPrepare {
                round: r.take_u64("round")?,
                view: r.take_u64("view")?,
                history_digest: HashDigest::decode(r)?,
            },
            12 => Message::RepairCommit {
                round: r.take_u64("round")?,
                view: r.take_u64("view")?,
                history_digest: HashDigest::decode(r)?,
            },
            13 => Message::RepairDone {
                round: r.take_u64("round")?,
                view: r.take_u64("view")?,
                log_len: r.take_u64("log_len")?,
                history_digest: HashDigest::decode(r)?,
            },
            14 => Message::CommittedReply {
                round: r.take_u64("round")?,
                client: NodeId::decode(r)?,
                seq: r.take_u64("seq")?,
                result: r.take_bytes("result")?,
            },
            15 => Message::ViewChange {
                round: r.take_u64("round")?,
                new_view: r.take_u64("new_view")?,
                prepared: decode_option(r, "prepared")?,
                log: Box::new(Envelope::decode(r)?),
            },
            16 => Message::Stamped { stamped: StampedRequest::decode(r)? },
            17 => Message::Probe { send_ts: r.take_u64("send_ts")? },
            18 => Message::ProbeReply {
                send_ts: r.take_u64("send_ts")?,
                recv_ts: r.take_u64("recv_ts")?,
            },
            19 => Message::HistoryFetch { round: r.take_u64("round")? },
            20 => Message::RepairFetch {
                round: r.take_u64("round")?,
                needs: decode_vec(r, "needs")?,
            },
            21 => Message::RepairFetchReply {
                round: r.take_u64("round")?,
                requests: decode_vec(r, "requests")?,
            },
            other => return Err(WireError::UnknownTag(other)),
        })
    }
}

/// A message plus its sender and (possibly empty) signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub msg: Message,
    pub sender: NodeId,
    pub sig: Signature,
}

impl Envelope {
    fn signable_bytes(msg: &Message, sender: NodeId) -> Vec<u8> {
        let mut w = Writer::new();
        msg.encode(&mut w);
        sender.encode(&mut w);
        w.into_vec()
    }

    pub fn signed(msg: Message, key: &KeyPair) -> Self {
        let sig = key.sign(&Self::signable_bytes(&msg, key.id()));
        Envelope { msg, sender: key.id(), sig }
    }

    pub fn unsigned(msg: Message, sender: NodeId) -> Self {
        Envelope { msg, sender, sig: Signature::empty() }
    }

    /// Check the envelope signature. Messages that never carry one pass.
    pub fn verify(&self, ring: &Keyring) -> bool {
        if !self.msg.requires_signature() {
            return true;
        }
        ring.verify(self.sender, &Self::signable_bytes(&self.msg, self.sender), &self.sig)
    }
}

impl Wire for Envelope {
    fn encode(&self, w: &mut Writer) {
        self.msg.encode(w);
        self.sender.encode(w);
        self.sig.encode(w);
    }
    fn decode(r: &mut Reader<'_>) -> Result<Self, WireError> {
        Ok(Envelope {
            msg: Message::decode(r)?,
            sender: NodeId::decode(r)?,
            sig: Signature::decode(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, CryptoMode};
    use crate::types::ClientRequest;

    fn sample_digest() -> HashDigest {
        digest(CryptoMode::Null, b"x")
    }

    fn sample_request(seq: u64) -> ClientRequest {
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Client(0), 1);
        ClientRequest::new_signed(&key, seq, vec![1, 2, 3])
    }

    fn sample_messages() -> Vec<Message> {
        let d = sample_digest();
        let req = sample_request(0);
        let stamped = StampedRequest { request: req.clone(), eta: 500, proxy: NodeId::Proxy(0) };
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Replica(0), 1);
        let sync = Envelope::signed(
            Message::Sync {
                round: 0,
                index: 3,
                digest: d.clone(),
                eta_star: 7,
                app_digest: d.clone(),
            },
            &key,
        );
        let log = Envelope::signed(
            Message::Log {
                view: 0,
                round: 0,
                base_index: -1,
                base_digest: d.clone(),
                base_proof: vec![],
                eta_star: 9,
                entries: vec![LogEntryId {
                    digest: d.clone(),
                    client: NodeId::Client(0),
                    seq: 0,
                    op_digest: d.clone(),
                }],
            },
            &key,
        );
        let history = Envelope::signed(
            Message::RepairHistory {
                round: 0,
                view: 0,
                logs: vec![log.clone()],
                view_change_proof: vec![],
            },
            &key,
        );
        vec![
            Message::Request { request: req.clone() },
            Message::Stamped { stamped: stamped.clone() },
            Message::SpecReply {
                round: 1,
                client: NodeId::Client(0),
                seq: 2,
                index: 3,
                digest: d.clone(),
                result: vec![9],
            },
            sync.msg.clone(),
            Message::Checkpoint { round: 0, index: 3, digest: d.clone(), app_digest: d.clone() },
            Message::Timeout { round: 0, index: 3 },
            Message::TimeoutProof { round: 0, index: 3, timeouts: vec![sync.clone()] },
            Message::ConflictProof { round: 0, index: 3, syncs: vec![sync.clone()] },
            Message::StateRequest { index: 3 },
            Message::StateReply { index: 3, snapshot: vec![1], proof: vec![sync.clone()] },
            log.msg.clone(),
            history.msg.clone(),
            Message::RepairPrepare { round: 0, view: 0, history_digest: d.clone() },
            Message::RepairCommit { round: 0, view: 0, history_digest: d.clone() },
            Message::RepairDone { round: 0, view: 0, log_len: 5, history_digest: d.clone() },
            Message::CommittedReply { round: 0, client: NodeId::Client(0), seq: 2, result: vec![] },
            Message::ViewChange {
                round: 0,
                new_view: 1,
                prepared: Some(PrepareCert {
                    view: 0,
                    history_digest: d.clone(),
                    history: Box::new(history),
                    prepares: vec![],
                }),
                log: Box::new(log),
            },
            Message::Probe { send_ts: 11 },
            Message::ProbeReply { send_ts: 11, recv_ts: 15 },
            Message::HistoryFetch { round: 4 },
            Message::RepairFetch { round: 4, needs: vec![sample_request(1).into_rid()] },
            Message::RepairFetchReply { round: 4, requests: vec![stamped] },
        ]
    }

    #[test]
    fn every_variant_round_trips() {
        for msg in sample_messages() {
            let env = Envelope::unsigned(msg, NodeId::Replica(1));
            let bytes = env.to_bytes();
            let back = Envelope::from_bytes(&bytes).unwrap();
            assert_eq!(env, back, "variant {}", env.msg.tag_name());
        }
    }

    #[test]
    fn tags_are_unique() {
        let msgs = sample_messages();
        let mut tags: Vec<u8> = msgs.iter().map(|m| m.tag()).collect();
        tags.sort_unstable();
        tags.dedup();
        assert_eq!(tags.len(), msgs.len());
    }

    #[test]
    fn signed_envelope_verifies_and_detects_tamper() {
        let key = KeyPair::from_seed(CryptoMode::Ed25519, NodeId::Replica(2), 3);
        let mut ring = Keyring::new(CryptoMode::Ed25519);
        ring.register(&key);
        let env = Envelope::signed(Message::Timeout { round: 1, index: 4 }, &key);
        assert!(env.verify(&ring));
        let mut bad = env.clone();
        bad.msg = Message::Timeout { round: 1, index: 5 };
        assert!(!bad.verify(&ring));
        let mut forged_sender = env;
        forged_sender.sender = NodeId::Replica(3);
        assert!(!forged_sender.verify(&ring));
    }

    impl ClientRequest {
        fn into_rid(self) -> RequestId {
            RequestId {
                client: self.client,
                seq: self.seq,
                op_digest: digest(CryptoMode::Null, &self.op),
            }
        }
    }
}
