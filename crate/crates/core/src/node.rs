//! The sans-io contract between protocol engines and their host.
//!
//! Engines (replica, proxy, client) are deterministic state machines: the
//! host feeds them messages and timer fires stamped with the node's local
//! clock, and they emit `Action`s. The host — the simulator or a real
//! socket loop — owns delivery, scheduling, and the clock. Engines never
//! read wall time.

use crate::message::Envelope;
use crate::types::{Micros, NodeId};

/// Timers an engine can arm. One timer per kind is active at a time;
/// re-arming replaces the previous instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TimerKind {
    /// Periodic log synchronization.
    Sync,
    /// Checkpoint timeout for one log index.
    Chkpt(i64),
    /// Repair progress / view change.
    ViewChange,
    /// Alignment state-request retry.
    AlignRetry,
    /// Retry for repair-time request/state fetches.
    RepairRetry,
    /// Wake when the release queue's next ETA is due.
    Release,
    /// Proxy background delay probe.
    Probe,
    /// Client retransmission for one sequence number.
    Retransmit(u64),
}

/// Result delivery from a client engine to the application.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub seq: u64,
    pub result: Vec<u8>,
    pub path: CommitPath,
    pub latency: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CommitPath {
    Fast,
    Repair,
}

impl CommitPath {
    pub fn as_str(self) -> &'static str {
        match self {
            CommitPath::Fast => "FAST",
            CommitPath::Repair => "REPAIR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Send { to: NodeId, env: Envelope },
    /// Arm `kind` to fire at local time `at`; `gen` guards stale fires.
    SetTimer { kind: TimerKind, at: Micros, gen: u64 },
    CancelTimer { kind: TimerKind },
    Deliver(Delivery),
    Trace(crate::trace::TraceEvent),
}

/// Helper collecting the per-event outputs of an engine.
#[derive(Debug, Default)]
pub struct Outbox {
    pub actions: Vec<Action>,
}

impl Outbox {
    pub fn send(&mut self, to: NodeId, env: Envelope) {
        self.actions.push(Action::Send { to, env });
    }

    pub fn broadcast(&mut self, n: usize, env: Envelope) {
        for i in 0..n {
            self.actions.push(Action::Send { to: NodeId::Replica(i as u32), env: env.clone() });
        }
    }

    /// Broadcast to every replica except `skip` (a replica's own vote is
    /// recorded locally, not self-delivered).
    pub fn broadcast_except(&mut self, n: usize, skip: u32, env: Envelope) {
        for i in 0..n {
            if i as u32 != skip {
                self.actions.push(Action::Send { to: NodeId::Replica(i as u32), env: env.clone() });
            }
        }
    }

    pub fn set_timer(&mut self, kind: TimerKind, at: Micros, gen: u64) {
        self.actions.push(Action::SetTimer { kind, at, gen });
    }

    pub fn cancel_timer(&mut self, kind: TimerKind) {
        self.actions.push(Action::CancelTimer { kind });
    }

    pub fn trace(&mut self, ev: crate::trace::TraceEvent) {
        self.actions.push(Action::Trace(ev));
    }

    pub fn drain(&mut self) -> Vec<Action> {
        std::mem::take(&mut self.actions)
    }
}
