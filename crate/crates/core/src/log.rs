//! The hash-chained replicated log.
//!
//! Entry `k` stores the request, its ETA, the execution result, and the
//! chained digest `H(k) = digest(request identity || H(k-1))` with
//! `H(-1) = digest("")`. Equal digests at equal indices imply equal
//! prefixes, which is what every quorum check in the protocol leans on.
//!
//! A log may start from an opaque base: a replica that aligned to a quorum
//! checkpoint knows the chain digest at the checkpoint index without
//! holding the entries below it.

use crate::crypto::{chain_base, digest, CryptoMode, HashDigest};
use crate::message::{Envelope, LogEntryId};
use crate::types::{ClientRequest, Micros, NodeId, StampedRequest};
use crate::wire::Writer;

/// One slot of the replicated log.
#[derive(Debug, Clone)]
pub struct LogEntry {
    pub request: ClientRequest,
    pub eta: Micros,
    pub proxy: NodeId,
    pub result: Vec<u8>,
    /// Chained digest H(k).
    pub digest: HashDigest,
    /// Largest ETA among entries up to and including this one.
    pub eta_max: Micros,
    /// False when execution was a duplicate-suppression no-op.
    pub mutated: bool,
}

impl LogEntry {
    pub fn stamped(&self) -> StampedRequest {
        StampedRequest { request: self.request.clone(), eta: self.eta, proxy: self.proxy }
    }
}

/// H(k) = digest(prev || request identity).
pub fn chain_digest(mode: CryptoMode, prev: &HashDigest, request: &ClientRequest) -> HashDigest {
    let mut w = Writer::new();
    w.put_bytes(prev.as_bytes());
    let chained = request.chain_bytes();
    w.put_bytes(&chained);
    digest(mode, &w.into_vec())
}

/// A committed log prefix: index, the n-p consistent SYNC messages proving
/// it, the application snapshot at that index, and the largest ETA the
/// prefix covers.
#[derive(Debug, Clone)]
pub struct CheckpointState {
    pub index: i64,
    pub proof: Vec<Envelope>,
    pub snapshot: Vec<u8>,
    pub eta_star: Micros,
}

impl CheckpointState {
    /// The pre-genesis checkpoint: nothing committed yet.
    pub fn genesis(mode: CryptoMode, snapshot: Vec<u8>) -> Self {
        let _ = mode;
        CheckpointState { index: -1, proof: Vec::new(), snapshot, eta_star: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ReplicatedLog {
    mode: CryptoMode,
    /// Highest index whose entries are opaque; -1 when fully materialized.
    base_index: i64,
    base_digest: HashDigest,
    base_eta_max: Micros,
    entries: Vec<LogEntry>,
}

impl ReplicatedLog {
    pub fn new(mode: CryptoMode) -> Self {
        ReplicatedLog {
            mode,
            base_index: -1,
            base_digest: chain_base(mode),
            base_eta_max: 0,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> u64 {
        (self.base_index + 1) as u64 + self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of the last entry, or -1 for an empty log.
    pub fn last_index(&self) -> i64 {
        self.len() as i64 - 1
    }

    pub fn base_index(&self) -> i64 {
        self.base_index
    }

    pub fn entry(&self, index: i64) -> Option<&LogEntry> {
        if index <= self.base_index {
            return None;
        }
        self.entries.get((index - self.base_index - 1) as usize)
    }

    /// Chain digest at `index`; known for the base and all materialized
    /// entries.
    pub fn digest_at(&self, index: i64) -> Option<&HashDigest> {
        if index == self.base_index {
            Some(&self.base_digest)
        } else {
            self.entry(index).map(|e| &e.digest)
        }
    }

    /// Largest ETA among entries with index <= `index`.
    pub fn eta_max_at(&self, index: i64) -> Option<Micros> {
        if index == self.base_index {
            Some(self.base_eta_max)
        } else {
            self.entry(index).map(|e| e.eta_max)
        }
    }

    pub fn append(&mut self, request: ClientRequest, eta: Micros, proxy: NodeId, result: Vec<u8>, mutated: bool) -> &LogEntry {
        let prev = self.digest_at(self.last_index()).expect("chain head").clone();
        let prev_eta = self.eta_max_at(self.last_index()).unwrap_or(0);
        let entry = LogEntry {
            digest: chain_digest(self.mode, &prev, &request),
            eta_max: prev_eta.max(eta),
            request,
            eta,
            proxy,
            result,
            mutated,
        };
        self.entries.push(entry);
        self.entries.last().unwrap()
    }

    /// Drop every entry above `index`, returning the removed suffix in
    /// log order.
    pub fn truncate_to(&mut self, index: i64) -> Vec<LogEntry> {
        let keep = if index <= self.base_index { 0 } else { (index - self.base_index) as usize };
        self.entries.split_off(keep.min(self.entries.len()))
    }

    /// Replace everything through `index` with an opaque committed base,
    /// returning the discarded materialized entries.
    pub fn rebase(&mut self, index: i64, base_digest: HashDigest, base_eta_max: Micros) -> Vec<LogEntry> {
        let old = std::mem::take(&mut self.entries);
        self.base_index = index;
        self.base_digest = base_digest;
        self.base_eta_max = base_eta_max;
        old
    }

    pub fn entries_from(&self, index: i64) -> impl Iterator<Item = (i64, &LogEntry)> {
        let start = (index.max(self.base_index + 1) - self.base_index - 1) as usize;
        let base = self.base_index;
        self.entries.iter().enumerate().skip(start).map(move |(i, e)| (base + 1 + i as i64, e))
    }

    /// Repair LOG summary entries starting strictly above `base`.
    pub fn summary_from(&self, base: i64) -> Vec<LogEntryId> {
        self.entries_from(base + 1)
            .map(|(_, e)| LogEntryId {
                digest: e.digest.clone(),
                client: e.request.client,
                seq: e.request.seq,
                op_digest: digest(self.mode, &e.request.op),
            })
            .collect()
    }

    /// Whether `index` is covered by materialized entries (or the base).
    pub fn covers(&self, index: i64) -> bool {
        index >= self.base_index && index <= self.last_index()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;

    fn req(seq: u64, op: &[u8]) -> ClientRequest {
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Client(0), 1);
        ClientRequest::new_signed(&key, seq, op.to_vec())
    }

    fn push(log: &mut ReplicatedLog, seq: u64, op: &[u8], eta: Micros) {
        log.append(req(seq, op), eta, NodeId::Proxy(0), vec![], true);
    }

    #[test]
    fn empty_chain_base_case() {
        let log = ReplicatedLog::new(CryptoMode::Null);
        assert_eq!(log.len(), 0);
        assert_eq!(log.digest_at(-1), Some(&chain_base(CryptoMode::Null)));
        let h0 = chain_digest(CryptoMode::Null, &chain_base(CryptoMode::Null), &req(0, b"a"));
        let mut log2 = ReplicatedLog::new(CryptoMode::Null);
        push(&mut log2, 0, b"a", 1);
        assert_eq!(log2.digest_at(0), Some(&h0));
    }

    #[test]
    fn chain_digest_is_deterministic() {
        let prev = chain_base(CryptoMode::Ed25519);
        let r = req(3, b"op");
        assert_eq!(
            chain_digest(CryptoMode::Ed25519, &prev, &r),
            chain_digest(CryptoMode::Ed25519, &prev, &r)
        );
    }

    #[test]
    fn equal_prefixes_give_equal_digests() {
        // Two logs built from the same requests agree entry by entry with a
        // from-scratch recomputation.
        let ops: Vec<&[u8]> = vec![b"a", b"b", b"c", b"d"];
        let mut a = ReplicatedLog::new(CryptoMode::Null);
        let mut b = ReplicatedLog::new(CryptoMode::Null);
        let mut expect = chain_base(CryptoMode::Null);
        for (i, op) in ops.iter().enumerate() {
            push(&mut a, i as u64, op, i as u64);
            push(&mut b, i as u64, op, i as u64);
            expect = chain_digest(CryptoMode::Null, &expect, &req(i as u64, op));
            assert_eq!(a.digest_at(i as i64), Some(&expect));
            assert_eq!(a.digest_at(i as i64), b.digest_at(i as i64));
        }
    }

    #[test]
    fn changing_any_entry_changes_the_head() {
        let mut a = ReplicatedLog::new(CryptoMode::Null);
        let mut b = ReplicatedLog::new(CryptoMode::Null);
        for i in 0..4u64 {
            push(&mut a, i, b"x", i);
            push(&mut b, i, if i == 1 { b"y" } else { b"x" }, i);
        }
        assert_ne!(a.digest_at(3), b.digest_at(3));
    }

    #[test]
    fn eta_max_is_prefix_monotone() {
        let mut log = ReplicatedLog::new(CryptoMode::Null);
        for (i, eta) in [50u64, 20, 90, 60].into_iter().enumerate() {
            push(&mut log, i as u64, b"x", eta);
        }
        assert_eq!(log.eta_max_at(0), Some(50));
        assert_eq!(log.eta_max_at(1), Some(50));
        assert_eq!(log.eta_max_at(2), Some(90));
        assert_eq!(log.eta_max_at(3), Some(90));
    }

    #[test]
    fn rebase_makes_prefix_opaque() {
        let mut log = ReplicatedLog::new(CryptoMode::Null);
        for i in 0..3u64 {
            push(&mut log, i, b"x", i);
        }
        let marker = digest(CryptoMode::Null, b"ckpt");
        let dropped = log.rebase(4, marker.clone(), 99);
        assert_eq!(dropped.len(), 3);
        assert_eq!(log.len(), 5);
        assert_eq!(log.last_index(), 4);
        assert_eq!(log.digest_at(4), Some(&marker));
        assert_eq!(log.digest_at(2), None);
        assert!(!log.covers(3));
        assert!(log.covers(4));
    }

    #[test]
    fn truncate_returns_suffix() {
        let mut log = ReplicatedLog::new(CryptoMode::Null);
        for i in 0..5u64 {
            push(&mut log, i, b"x", i);
        }
        let cut = log.truncate_to(1);
        assert_eq!(cut.len(), 3);
        assert_eq!(log.len(), 2);
        assert_eq!(cut[0].request.seq, 2);
    }
}
