//! Execution traces: the observable record of a run.
//!
//! A trace is a sequence of timestamped records, one JSON object per line.
//! The safety checker consumes only this schema — it never looks inside a
//! protocol engine — and the per-delivery records double as the debugging
//! log (time, src, dst, tag).

use serde::{Deserialize, Serialize};

use crate::crypto::HashDigest;
use crate::node::CommitPath;
use crate::types::{Micros, NodeId};

pub mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.iter().map(|b| format!("{b:02x}")).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        if s.len() % 2 != 0 {
            return Err(serde::de::Error::custom("odd hex length"));
        }
        (0..s.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(serde::de::Error::custom))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "kebab-case")]
pub enum TraceEvent {
    /// A message delivery observed by the transport.
    Deliver { src: NodeId, dst: NodeId, tag: String },
    /// A message dropped or suppressed by the transport or a fault.
    Drop { src: NodeId, dst: NodeId, tag: String },
    /// Client submitted a new request.
    Submit { client: NodeId, seq: u64 },
    /// Client assembled a commit quorum and delivered the result.
    ClientCommit {
        client: NodeId,
        seq: u64,
        path: CommitPath,
        round: u64,
        /// Log index the quorum agreed on; present for fast-path commits.
        index: Option<u64>,
        #[serde(with = "hex_bytes")]
        result: Vec<u8>,
        latency: Micros,
    },
    /// A log entry became committed at a replica.
    CommitEntry {
        replica: NodeId,
        index: u64,
        client: NodeId,
        seq: u64,
        #[serde(with = "hex_bytes")]
        result: Vec<u8>,
        digest: HashDigest,
        /// False when the execution was a duplicate-suppression no-op.
        mutated: bool,
    },
    /// A replica learned a committed prefix digest without the entries
    /// (state transfer during alignment or repair).
    CommitWatermark { replica: NodeId, index: i64, digest: HashDigest },
    /// Replica operating-mode transition.
    ModeChange { replica: NodeId, mode: String, round: u64, view: u64 },
    CheckpointInstalled { replica: NodeId, index: i64, digest: HashDigest },
    RepairCommitted { replica: NodeId, round: u64, view: u64, log_len: u64 },
    /// Evidence of Byzantine behavior (metrics only, never protocol input).
    Evidence { node: NodeId, desc: String },
    /// A proxy clamped a negative one-way-delay sample to zero.
    SkewClamp { proxy: NodeId },
    /// A replica detected an internal safety contradiction and froze.
    SafetyHalt { replica: NodeId, reason: String },
}

/// A trace record: global time, monotone sequence number, event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Micros,
    pub seq: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

/// In-memory trace sink; renders to JSONL.
#[derive(Debug, Default)]
pub struct TraceSink {
    records: Vec<TraceRecord>,
    /// When false, high-volume Deliver/Drop records are skipped.
    pub verbose_delivery: bool,
}

impl TraceSink {
    pub fn new(verbose_delivery: bool) -> Self {
        TraceSink { records: Vec::new(), verbose_delivery }
    }

    pub fn push(&mut self, t: Micros, event: TraceEvent) {
        if !self.verbose_delivery
            && matches!(event, TraceEvent::Deliver { .. } | TraceEvent::Drop { .. })
        {
            return;
        }
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { t, seq, event });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_jsonl(input: &str) -> Result<Vec<TraceRecord>, serde_json::Error> {
    input
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, CryptoMode};

    #[test]
    fn jsonl_roundtrip() {
        let mut sink = TraceSink::new(true);
        sink.push(5, TraceEvent::Deliver {
            src: NodeId::Proxy(0),
            dst: NodeId::Replica(1),
            tag: "SYNC".into(),
        });
        sink.push(9, TraceEvent::CommitEntry {
            replica: NodeId::Replica(1),
            index: 0,
            client: NodeId::Client(2),
            seq: 0,
            result: vec![1, 0xab],
            digest: digest(CryptoMode::Null, b"x"),
            mutated: true,
        });
        let text = sink.to_jsonl();
        let back = parse_jsonl(&text).unwrap();
        assert_eq!(back, sink.records());
    }

    #[test]
    fn delivery_records_respect_verbosity() {
        let mut sink = TraceSink::new(false);
        sink.push(1, TraceEvent::Drop {
            src: NodeId::Proxy(0),
            dst: NodeId::Replica(0),
            tag: "PROBE".into(),
        });
        sink.push(2, TraceEvent::Submit { client: NodeId::Client(0), seq: 0 });
        assert_eq!(sink.records().len(), 1);
    }
}
