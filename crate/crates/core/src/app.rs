//! Replicated applications: execute / snapshot / restore, plus the
//! execution wrapper replicas drive.
//!
//! Snapshots use canonical sorted serialization so the snapshot digest is
//! identical across replicas with equal state. Rollback is implemented by
//! snapshot-restore plus replay; the uncommitted window is bounded by the
//! checkpoint interval, so per-op undo isn't worth the machinery.
//!
//! Result byte conventions: the first byte is a status marker, `0x01` ok
//! with payload, `0x00` ok-absent, `0xff` application error. The op is
//! still logged and committed either way.

use std::collections::BTreeMap;

use crate::crypto::{digest, CryptoMode, HashDigest};
use crate::types::NodeId;
use crate::wire::{Reader, Wire, WireError, Writer};

pub const RES_OK: u8 = 0x01;
pub const RES_ABSENT: u8 = 0x00;
pub const RES_ERR: u8 = 0xff;

pub fn error_result(msg: &str) -> Vec<u8> {
    let mut out = vec![RES_ERR];
    out.extend_from_slice(msg.as_bytes());
    out
}

/// A deterministic state machine with snapshot support.
pub trait App {
    fn execute(&mut self, op: &[u8]) -> Vec<u8>;
    fn snapshot(&self) -> Vec<u8>;
    fn restore(&mut self, snap: &[u8]) -> Result<(), WireError>;
    fn boxed_clone(&self) -> Box<dyn App + Send>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AppKind {
    Counter,
    Kv,
}

impl AppKind {
    pub fn build(self) -> Box<dyn App + Send> {
        match self {
            AppKind::Counter => Box::new(Counter::default()),
            AppKind::Kv => Box::new(KvStore::default()),
        }
    }
}

// ---------------------------------------------------------------------------
// Counter

pub const COUNTER_INC: u8 = 0x01;

/// The counter app: one op, increment; result is the new value.
#[derive(Debug, Default, Clone)]
pub struct Counter {
    value: u64,
}

impl Counter {
    pub fn value(&self) -> u64 {
        self.value
    }

    pub fn inc_op() -> Vec<u8> {
        vec![COUNTER_INC]
    }

    pub fn decode_value(res: &[u8]) -> Option<u64> {
        if res.len() == 9 && res[0] == RES_OK {
            Some(u64::from_be_bytes(res[1..].try_into().unwrap()))
        } else {
            None
        }
    }
}

impl App for Counter {
    fn execute(&mut self, op: &[u8]) -> Vec<u8> {
        if op == [COUNTER_INC] {
            self.value += 1;
            let mut out = vec![RES_OK];
            out.extend_from_slice(&self.value.to_be_bytes());
            out
        } else {
            error_result("unknown counter op")
        }
    }

    fn snapshot(&self) -> Vec<u8> {
        self.value.to_be_bytes().to_vec()
    }

    fn restore(&mut self, snap: &[u8]) -> Result<(), WireError> {
        let bytes: [u8; 8] =
            snap.try_into().map_err(|_| WireError::Invalid("counter snapshot"))?;
        self.value = u64::from_be_bytes(bytes);
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn App + Send> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// Key-value store

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvOp {
    Get { key: Vec<u8> },
    Put { key: Vec<u8>, value: Vec<u8> },
    Delete { key: Vec<u8> },
}

impl KvOp {
    pub fn encode_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        match self {
            KvOp::Get { key } => {
                w.put_u8(0);
                w.put_bytes(key);
            }
            KvOp::Put { key, value } => {
                w.put_u8(1);
                w.put_bytes(key);
                w.put_bytes(value);
            }
            KvOp::Delete { key } => {
                w.put_u8(2);
                w.put_bytes(key);
            }
        }
        w.into_vec()
    }

    pub fn decode_bytes(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let op = match r.take_u8("kv op kind")? {
            0 => KvOp::Get { key: r.take_bytes("kv key")? },
            1 => KvOp::Put { key: r.take_bytes("kv key")?, value: r.take_bytes("kv value")? },
            2 => KvOp::Delete { key: r.take_bytes("kv key")? },
            _ => return Err(WireError::Invalid("kv op kind")),
        };
        if r.remaining() > 0 {
            return Err(WireError::Trailing(r.remaining()));
        }
        Ok(op)
    }
}

/// In-memory KV store over a sorted map; snapshots serialize in key order.
#[derive(Debug, Default, Clone)]
pub struct KvStore {
    map: BTreeMap<Vec<u8>, Vec<u8>>,
}

impl App for KvStore {
    fn execute(&mut self, op: &[u8]) -> Vec<u8> {
        match KvOp::decode_bytes(op) {
            Ok(KvOp::Get { key }) => match self.map.get(&key) {
                Some(v) => {
                    let mut out = vec![RES_OK];
                    out.extend_from_slice(v);
                    out
                }
                None => vec![RES_ABSENT],
            },
            Ok(KvOp::Put { key, value }) => {
                self.map.insert(key, value);
                vec![RES_OK]
            }
            Ok(KvOp::Delete { key }) => {
                if self.map.remove(&key).is_some() {
                    vec![RES_OK]
                } else {
                    vec![RES_ABSENT]
                }
            }
            Err(_) => error_result("malformed kv op"),
        }
    }

    fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.map.len() as u32);
        for (k, v) in &self.map {
            w.put_bytes(k);
            w.put_bytes(v);
        }
        w.into_vec()
    }

    fn restore(&mut self, snap: &[u8]) -> Result<(), WireError> {
        let mut r = Reader::new(snap);
        let n = r.take_count("kv snapshot size")?;
        let mut map = BTreeMap::new();
        for _ in 0..n {
            let k = r.take_bytes("kv snapshot key")?;
            let v = r.take_bytes("kv snapshot value")?;
            map.insert(k, v);
        }
        if r.remaining() > 0 {
            return Err(WireError::Trailing(r.remaining()));
        }
        self.map = map;
        Ok(())
    }

    fn boxed_clone(&self) -> Box<dyn App + Send> {
        Box::new(self.clone())
    }
}

// ---------------------------------------------------------------------------
// Execution wrapper

/// How many executed (seq, result) pairs to remember per client for
/// duplicate suppression.
const CLIENT_TABLE_HORIZON: usize = 64;

/// Per-client record of recently executed requests.
#[derive(Debug, Default, Clone)]
struct ClientRecord {
    /// Sorted by seq, at most CLIENT_TABLE_HORIZON entries; (seq, result,
    /// log index at execution).
    entries: Vec<(u64, Vec<u8>, i64)>,
    /// Highest seq ever pruned; anything at or below is an ancient dup.
    pruned_below: u64,
}

/// What a duplicate lookup found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DupStatus {
    Fresh,
    /// Executed before: prior result and the log index it landed at.
    Executed(Vec<u8>, i64),
    /// Older than the retained horizon; drop silently.
    Ancient,
}

/// The replica-side execution layer: the application plus the client
/// duplicate table. Both are part of replicated state, so snapshots cover
/// them together and rollback via `restore` keeps them consistent.
pub struct ExecState {
    mode: CryptoMode,
    app: Box<dyn App + Send>,
    table: BTreeMap<NodeId, ClientRecord>,
}

impl ExecState {
    pub fn new(mode: CryptoMode, app: Box<dyn App + Send>) -> Self {
        ExecState { mode, app, table: BTreeMap::new() }
    }

    pub fn lookup(&self, client: NodeId, seq: u64) -> DupStatus {
        let Some(rec) = self.table.get(&client) else {
            return DupStatus::Fresh;
        };
        if let Some((_, res, idx)) = rec.entries.iter().find(|(s, _, _)| *s == seq) {
            return DupStatus::Executed(res.clone(), *idx);
        }
        if seq <= rec.pruned_below {
            return DupStatus::Ancient;
        }
        DupStatus::Fresh
    }

    /// Execute an op, recording it in the client table. Callers check
    /// `lookup` first; a repeated call for an executed seq is a no-op that
    /// returns the prior result.
    pub fn execute(&mut self, client: NodeId, seq: u64, op: &[u8], log_index: i64) -> (Vec<u8>, bool) {
        match self.lookup(client, seq) {
            DupStatus::Executed(res, _) => (res, false),
            DupStatus::Ancient => (error_result("stale duplicate"), false),
            DupStatus::Fresh => {
                let res = self.app.execute(op);
                let rec = self.table.entry(client).or_default();
                let pos = rec.entries.partition_point(|(s, _, _)| *s < seq);
                rec.entries.insert(pos, (seq, res.clone(), log_index));
                if rec.entries.len() > CLIENT_TABLE_HORIZON {
                    let (seq, _, _) = rec.entries.remove(0);
                    rec.pruned_below = rec.pruned_below.max(seq);
                }
                (res, true)
            }
        }
    }

    /// Rewrite the recorded log index for an executed request (repair can
    /// move entries to new slots).
    pub fn relocate(&mut self, client: NodeId, seq: u64, log_index: i64) {
        if let Some(rec) = self.table.get_mut(&client) {
            if let Some(e) = rec.entries.iter_mut().find(|(s, _, _)| *s == seq) {
                e.2 = log_index;
            }
        }
    }

    /// Canonical snapshot: client table (sorted) then app bytes.
    pub fn snapshot(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.put_u32(self.table.len() as u32);
        for (client, rec) in &self.table {
            client.encode(&mut w);
            w.put_u64(rec.pruned_below);
            w.put_u32(rec.entries.len() as u32);
            for (seq, res, idx) in &rec.entries {
                w.put_u64(*seq);
                w.put_bytes(res);
                w.put_i64(*idx);
            }
        }
        w.put_bytes(&self.app.snapshot());
        w.into_vec()
    }

    pub fn snapshot_digest(&self) -> HashDigest {
        digest(self.mode, &self.snapshot())
    }

    pub fn restore(&mut self, snap: &[u8]) -> Result<(), WireError> {
        let mut r = Reader::new(snap);
        let n = r.take_count("client table size")?;
        let mut table = BTreeMap::new();
        for _ in 0..n {
            let client = NodeId::decode(&mut r)?;
            let pruned_below = r.take_u64("pruned_below")?;
            let m = r.take_count("client record size")?;
            let mut entries = Vec::with_capacity(m.min(CLIENT_TABLE_HORIZON));
            for _ in 0..m {
                let seq = r.take_u64("record seq")?;
                let res = r.take_bytes("record result")?;
                let idx = r.take_i64("record index")?;
                entries.push((seq, res, idx));
            }
            table.insert(client, ClientRecord { entries, pruned_below });
        }
        let app_bytes = r.take_bytes("app snapshot")?;
        if r.remaining() > 0 {
            return Err(WireError::Trailing(r.remaining()));
        }
        self.app.restore(&app_bytes)?;
        self.table = table;
        Ok(())
    }

    /// Independent copy for scratch replay.
    pub fn fork(&self) -> ExecState {
        ExecState { mode: self.mode, app: self.app.boxed_clone(), table: self.table.clone() }
    }
}

impl std::fmt::Debug for ExecState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecState").field("clients", &self.table.len()).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counter_increments() {
        let mut c = Counter::default();
        assert_eq!(Counter::decode_value(&c.execute(&Counter::inc_op())), Some(1));
        c.execute(&Counter::inc_op());
        assert_eq!(Counter::decode_value(&c.execute(&Counter::inc_op())), Some(3));
    }

    #[test]
    fn counter_unknown_op_errors_but_executes() {
        let mut c = Counter::default();
        let res = c.execute(b"\x7f");
        assert_eq!(res[0], RES_ERR);
        assert_eq!(c.value(), 0);
    }

    #[test]
    fn counter_rollback_then_replay() {
        let mut c = Counter::default();
        c.execute(&Counter::inc_op());
        let snap = c.snapshot();
        c.execute(&Counter::inc_op());
        c.execute(&Counter::inc_op());
        c.restore(&snap).unwrap();
        assert_eq!(Counter::decode_value(&c.execute(&Counter::inc_op())), Some(2));
    }

    #[test]
    fn kv_put_get_delete() {
        let mut kv = KvStore::default();
        kv.execute(&KvOp::Put { key: b"k".to_vec(), value: b"v".to_vec() }.encode_bytes());
        let got = kv.execute(&KvOp::Get { key: b"k".to_vec() }.encode_bytes());
        assert_eq!(got, [&[RES_OK][..], b"v"].concat());
        assert_eq!(kv.execute(&KvOp::Get { key: b"nope".to_vec() }.encode_bytes()), vec![RES_ABSENT]);
        assert_eq!(kv.execute(&KvOp::Delete { key: b"k".to_vec() }.encode_bytes()), vec![RES_OK]);
        assert_eq!(kv.execute(&KvOp::Get { key: b"k".to_vec() }.encode_bytes()), vec![RES_ABSENT]);
    }

    #[test]
    fn kv_malformed_op_is_an_error_result() {
        let mut kv = KvStore::default();
        assert_eq!(kv.execute(b"\x09garbage")[0], RES_ERR);
    }

    #[test]
    fn kv_snapshot_roundtrip() {
        let mut kv = KvStore::default();
        kv.execute(&KvOp::Put { key: b"k".to_vec(), value: b"v1".to_vec() }.encode_bytes());
        let snap = kv.snapshot();
        kv.execute(&KvOp::Put { key: b"k".to_vec(), value: b"v2".to_vec() }.encode_bytes());
        kv.restore(&snap).unwrap();
        let got = kv.execute(&KvOp::Get { key: b"k".to_vec() }.encode_bytes());
        assert_eq!(got, [&[RES_OK][..], b"v1"].concat());
    }

    #[test]
    fn exec_state_dedups_and_rolls_back_with_snapshot() {
        let c = NodeId::Client(0);
        let mut exec = ExecState::new(CryptoMode::Null, Box::new(Counter::default()));
        let (r1, m1) = exec.execute(c, 0, &Counter::inc_op(), 0);
        assert!(m1);
        let snap = exec.snapshot();
        let (r1b, m1b) = exec.execute(c, 0, &Counter::inc_op(), 0);
        assert!(!m1b);
        assert_eq!(r1, r1b);
        exec.execute(c, 1, &Counter::inc_op(), 1);
        // restore rewinds both the app and the dedup table
        exec.restore(&snap).unwrap();
        assert_eq!(exec.lookup(c, 1), DupStatus::Fresh);
        let (r2, m2) = exec.execute(c, 1, &Counter::inc_op(), 1);
        assert!(m2);
        assert_eq!(Counter::decode_value(&r2), Some(2));
    }

    #[test]
    fn exec_snapshot_digest_matches_across_instances() {
        let mut a = ExecState::new(CryptoMode::Null, Box::new(KvStore::default()));
        let mut b = ExecState::new(CryptoMode::Null, Box::new(KvStore::default()));
        for (seq, k) in [(0u64, b"x"), (1u64, b"y")] {
            let op = KvOp::Put { key: k.to_vec(), value: b"v".to_vec() }.encode_bytes();
            a.execute(NodeId::Client(1), seq, &op, seq as i64);
            b.execute(NodeId::Client(1), seq, &op, seq as i64);
        }
        assert_eq!(a.snapshot_digest(), b.snapshot_digest());
    }
}
