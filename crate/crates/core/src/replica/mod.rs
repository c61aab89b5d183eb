//! The replica protocol engine.
//!
//! A replica is a deterministic event-driven state machine over protocol
//! messages and timer events. In `Normal` mode it speculatively executes
//! requests in release order and answers clients with `SPEC-REPLY`;
//! in the background it synchronizes logs via the checkpoint subprotocol.
//! Divergence detected against a quorum checkpoint triggers `Aligning`;
//! failure to checkpoint at all escalates to `Repair`, a leader-based
//! round that merges logs, commits them, and starts the next round. Repair
//! stalls are resolved by an internal view change (`ViewChange` mode).
//!
//! Handlers run to completion atomically; hosts deliver one event at a
//! time and flush the emitted actions.

mod align;
pub mod merge;
mod repair;
mod sync;

use std::collections::{BTreeMap, BTreeSet};

use crate::app::{DupStatus, ExecState};
use crate::config::Config;
use crate::crypto::{digest, CryptoMode, HashDigest, KeyPair, Keyring};
use crate::log::{CheckpointState, ReplicatedLog};
use crate::message::{Envelope, Message};
use crate::node::{Outbox, TimerKind};
use crate::sequencer::ReleaseQueue;
use crate::trace::TraceEvent;
use crate::types::{Micros, NodeId, StampedRequest};

pub use merge::{construct_new_log, LogView, MergedLog};
pub use repair::RepairState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Normal,
    Aligning,
    Repair,
    ViewChange,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Normal => "NORMAL",
            Mode::Aligning => "ALIGNING",
            Mode::Repair => "REPAIR",
            Mode::ViewChange => "VIEW-CHANGE",
        }
    }

    fn in_repair(self) -> bool {
        matches!(self, Mode::Repair | Mode::ViewChange)
    }
}

#[derive(Debug, Default, Clone)]
pub struct ReplicaCounters {
    pub aligns: u64,
    pub repairs_entered: u64,
    pub rounds_completed: u64,
    pub stale_dropped: u64,
    pub bad_sig_dropped: u64,
    pub invalid_proof_dropped: u64,
    pub eta_guard_dropped: u64,
    pub requests_executed: u64,
    pub dup_suppressed: u64,
}

/// Snapshot of replica state for the harness.
#[derive(Debug, Clone)]
pub struct ReplicaStatus {
    pub id: NodeId,
    pub mode: &'static str,
    pub round: u64,
    pub view: u64,
    pub log_len: u64,
    pub chkpt_index: i64,
    pub start_idx: u64,
    pub queued: usize,
    pub halted: Option<String>,
    pub counters: ReplicaCounters,
}

#[derive(Debug, Clone)]
pub(crate) struct SyncRec {
    pub digest: HashDigest,
    pub app_digest: HashDigest,
    pub eta_star: Micros,
    pub env: Envelope,
}

#[derive(Debug)]
pub(crate) struct AlignState {
    pub target: i64,
    pub digest: HashDigest,
    pub app_digest: HashDigest,
    pub sources: Vec<u32>,
    pub next_source: usize,
}

pub struct Replica {
    pub(crate) cfg: Config,
    pub(crate) index: u32,
    pub(crate) id: NodeId,
    pub(crate) key: KeyPair,
    pub(crate) ring: Keyring,
    pub(crate) exec: ExecState,
    pub(crate) log: ReplicatedLog,
    pub(crate) chkpt: CheckpointState,
    pub(crate) round: u64,
    pub(crate) view: u64,
    /// First log index of the current round; everything below is committed.
    pub(crate) start_idx: u64,
    pub(crate) mode: Mode,
    /// Largest ETA processed so far.
    pub(crate) eta_seen: Micros,
    pub(crate) release: ReleaseQueue,

    // Checkpoint subprotocol state, cleared each round.
    pub(crate) synced: BTreeSet<i64>,
    pub(crate) sync_q: BTreeMap<i64, BTreeMap<u32, SyncRec>>,
    pub(crate) ckpt_q: BTreeMap<i64, BTreeMap<u32, (HashDigest, HashDigest)>>,
    pub(crate) timeout_q: BTreeMap<i64, BTreeMap<u32, Envelope>>,
    pub(crate) chkpt_timer_started: BTreeSet<i64>,
    pub(crate) timeout_sent: BTreeSet<i64>,
    pub(crate) proof_sent: BTreeSet<i64>,

    pub(crate) align: Option<AlignState>,
    pub(crate) repair: Option<RepairState>,
    /// Committed history of the previous round, kept to serve catch-up
    /// fetches.
    pub(crate) last_committed: Option<repair::LastCommitted>,

    /// Snapshot cache at recent sync indices.
    pub(crate) snapshots: BTreeMap<i64, Vec<u8>>,
    /// Messages for future rounds, replayed after the round advances.
    pub(crate) future: Vec<(NodeId, Envelope)>,
    pub(crate) timer_gens: BTreeMap<TimerKind, u64>,
    /// Highest log index already reported committed in the trace.
    pub(crate) traced_committed: i64,
    pub counters: ReplicaCounters,
    pub(crate) halted: Option<String>,
}

const FUTURE_BUFFER_CAP: usize = 512;

impl Replica {
    pub fn new(cfg: Config, key: KeyPair, ring: Keyring, app: Box<dyn crate::app::App + Send>) -> Self {
        let index = key.id().replica_index().expect("replica key");
        let exec = ExecState::new(cfg.crypto, app);
        let genesis_snapshot = exec.snapshot();
        Replica {
            id: key.id(),
            index,
            exec,
            log: ReplicatedLog::new(cfg.crypto),
            chkpt: CheckpointState::genesis(cfg.crypto, genesis_snapshot),
            round: 0,
            view: 0,
            start_idx: 0,
            mode: Mode::Normal,
            eta_seen: 0,
            release: ReleaseQueue::new(),
            synced: BTreeSet::new(),
            sync_q: BTreeMap::new(),
            ckpt_q: BTreeMap::new(),
            timeout_q: BTreeMap::new(),
            chkpt_timer_started: BTreeSet::new(),
            timeout_sent: BTreeSet::new(),
            proof_sent: BTreeSet::new(),
            align: None,
            repair: None,
            last_committed: None,
            snapshots: BTreeMap::new(),
            future: Vec::new(),
            timer_gens: BTreeMap::new(),
            traced_committed: -1,
            counters: ReplicaCounters::default(),
            halted: None,
            key,
            ring,
            cfg,
        }
    }

    pub fn status(&self) -> ReplicaStatus {
        ReplicaStatus {
            id: self.id,
            mode: self.mode.as_str(),
            round: self.round,
            view: self.view,
            log_len: self.log.len(),
            chkpt_index: self.chkpt.index,
            start_idx: self.start_idx,
            queued: self.release.len(),
            halted: self.halted.clone(),
            counters: self.counters.clone(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn log(&self) -> &ReplicatedLog {
        &self.log
    }

    pub fn checkpoint_index(&self) -> i64 {
        self.chkpt.index
    }

    // -- timers ------------------------------------------------------------

    pub(crate) fn arm(&mut self, out: &mut Outbox, kind: TimerKind, at: Micros) {
        let gen = self.timer_gens.entry(kind).or_insert(0);
        *gen += 1;
        out.set_timer(kind, at, *gen);
    }

    pub(crate) fn disarm(&mut self, out: &mut Outbox, kind: TimerKind) {
        self.timer_gens.remove(&kind);
        out.cancel_timer(kind);
    }

    fn timer_current(&self, kind: TimerKind, gen: u64) -> bool {
        self.timer_gens.get(&kind) == Some(&gen)
    }

    // -- trace helpers -----------------------------------------------------

    pub(crate) fn trace_mode(&mut self, out: &mut Outbox) {
        out.trace(TraceEvent::ModeChange {
            replica: self.id,
            mode: self.mode.as_str().to_string(),
            round: self.round,
            view: self.view,
        });
    }

    pub(crate) fn halt(&mut self, out: &mut Outbox, reason: String) {
        if self.halted.is_none() {
            out.trace(TraceEvent::SafetyHalt { replica: self.id, reason: reason.clone() });
            self.halted = Some(reason);
        }
    }

    /// The highest committed index: checkpoint or round boundary.
    pub(crate) fn committed_watermark(&self) -> i64 {
        self.chkpt.index.max(self.start_idx as i64 - 1)
    }

    /// Emit CommitEntry records for newly committed, materialized indices
    /// up to `upto`.
    pub(crate) fn trace_committed_entries(&mut self, out: &mut Outbox, upto: i64) {
        let from = self.traced_committed + 1;
        for idx in from..=upto {
            if let Some(e) = self.log.entry(idx) {
                out.trace(TraceEvent::CommitEntry {
                    replica: self.id,
                    index: idx as u64,
                    client: e.request.client,
                    seq: e.request.seq,
                    result: e.result.clone(),
                    digest: e.digest.clone(),
                    mutated: e.mutated,
                });
            }
        }
        self.traced_committed = self.traced_committed.max(upto);
    }

    // -- entry points --------------------------------------------------------

    pub fn on_start(&mut self, now: Micros, out: &mut Outbox) {
        self.arm(out, TimerKind::Sync, now + self.cfg.sync_timeout_us());
    }

    pub fn on_timer(&mut self, now: Micros, kind: TimerKind, gen: u64, out: &mut Outbox) {
        if self.halted.is_some() || !self.timer_current(kind, gen) {
            return;
        }
        match kind {
            TimerKind::Sync => {
                if self.mode == Mode::Normal {
                    self.do_sync(now, out);
                } else {
                    self.arm(out, TimerKind::Sync, now + self.cfg.sync_timeout_us());
                }
            }
            TimerKind::Chkpt(index) => self.on_chkpt_timeout(now, index, out),
            TimerKind::Release => self.pump_release(now, out),
            TimerKind::ViewChange => self.on_view_change_timer(now, out),
            TimerKind::AlignRetry => self.on_align_retry(now, out),
            TimerKind::RepairRetry => self.on_repair_retry(now, out),
            _ => {}
        }
    }

    pub fn on_message(&mut self, now: Micros, from: NodeId, env: Envelope, out: &mut Outbox) {
        if self.halted.is_some() {
            return;
        }
        if !env.verify(&self.ring) {
            self.counters.bad_sig_dropped += 1;
            return;
        }

        // Round gating: buffer messages from rounds we haven't reached and
        // drop stale ones, except the catch-up paths that serve round i-1.
        if let Some(r) = msg_round(&env.msg) {
            if r > self.round {
                if self.future.len() < FUTURE_BUFFER_CAP {
                    self.future.push((from, env));
                }
                return;
            }
            if r < self.round {
                self.on_stale_round(now, from, env, out);
                return;
            }
        }

        match env.msg.clone() {
            Message::Stamped { stamped } => self.on_stamped(now, stamped, out),
            Message::Probe { send_ts } => {
                let reply = Message::ProbeReply { send_ts, recv_ts: now };
                out.send(env.sender, Envelope::unsigned(reply, self.id));
            }
            Message::Sync { round: _, index, digest, eta_star, app_digest } => {
                self.on_sync(now, &env, index, digest, eta_star, app_digest, out)
            }
            Message::Checkpoint { round: _, index, digest, app_digest } => {
                self.on_checkpoint_msg(now, &env, index, digest, app_digest, out)
            }
            Message::Timeout { round: _, index } => self.on_timeout_msg(now, &env, index, out),
            Message::TimeoutProof { .. } | Message::ConflictProof { .. } => {
                self.on_proof_msg(now, &env, out)
            }
            Message::StateRequest { index } => self.on_state_request(env.sender, index, out),
            Message::StateReply { index, snapshot, proof } => {
                self.on_state_reply(now, index, snapshot, proof, out)
            }
            Message::Log { .. } => self.on_log(now, env, out),
            Message::RepairHistory { .. } => self.on_repair_history(now, env, out),
            Message::RepairPrepare { round: _, view, history_digest } => {
                self.on_repair_prepare(now, &env, view, history_digest, out)
            }
            Message::RepairCommit { round: _, view, history_digest } => {
                self.on_repair_commit(now, &env, view, history_digest, out)
            }
            Message::RepairDone { round: _, view, log_len: _, history_digest } => {
                self.on_repair_done(now, &env, view, history_digest, out)
            }
            Message::ViewChange { .. } => self.on_view_change(now, env, out),
            Message::HistoryFetch { round } => self.on_history_fetch(env.sender, round, out),
            Message::RepairFetch { round, needs } => {
                self.on_repair_fetch(env.sender, round, needs, out)
            }
            Message::RepairFetchReply { round: _, requests } => {
                self.on_repair_fetch_reply(now, requests, out)
            }
            _ => {}
        }
    }

    /// Serve catch-up traffic for the round we just finished; drop the rest.
    fn on_stale_round(&mut self, now: Micros, from: NodeId, env: Envelope, out: &mut Outbox) {
        let prev = self.round.wrapping_sub(1);
        match &env.msg {
            Message::ViewChange { round, .. } if *round == prev => {
                self.answer_old_round_view_change(env.sender, out);
            }
            Message::HistoryFetch { round } if *round == prev => {
                self.on_history_fetch(env.sender, *round, out);
            }
            Message::RepairFetch { round, needs } if *round == prev => {
                self.on_repair_fetch(env.sender, *round, needs.clone(), out);
            }
            _ => {
                let _ = (now, from);
                self.counters.stale_dropped += 1;
            }
        }
    }

    // -- fast path -----------------------------------------------------------

    fn on_stamped(&mut self, now: Micros, stamped: StampedRequest, out: &mut Outbox) {
        if !stamped.request.verify(&self.ring) {
            self.counters.bad_sig_dropped += 1;
            return;
        }
        self.release.enqueue(stamped, now, self.cfg.eta_overwrite_threshold_us());
        self.pump_release(now, out);
    }

    /// Drain due requests in release order. Outside Normal mode requests
    /// stay queued: alignment buffers them for replay, repair queues them
    /// for the next round.
    pub(crate) fn pump_release(&mut self, now: Micros, out: &mut Outbox) {
        if self.mode != Mode::Normal || self.halted.is_some() {
            return;
        }
        for stamped in self.release.drain_ready(now) {
            self.process_released(now, stamped, out);
            if self.halted.is_some() {
                return;
            }
        }
        if let Some(eta) = self.release.next_eta() {
            self.arm(out, TimerKind::Release, eta.max(now));
        }
    }

    fn process_released(&mut self, now: Micros, stamped: StampedRequest, out: &mut Outbox) {
        let client = stamped.request.client;
        let seq = stamped.request.seq;
        match self.exec.lookup(client, seq) {
            DupStatus::Executed(result, index) => {
                self.counters.dup_suppressed += 1;
                self.reemit_reply(client, seq, result, index, out);
            }
            DupStatus::Ancient => {
                self.counters.dup_suppressed += 1;
            }
            DupStatus::Fresh => {
                let index = self.log.len() as i64;
                let (result, mutated) =
                    self.exec.execute(client, seq, &stamped.request.op, index);
                self.eta_seen = self.eta_seen.max(stamped.eta);
                let entry = self.log.append(
                    stamped.request,
                    stamped.eta,
                    stamped.proxy,
                    result.clone(),
                    mutated,
                );
                let digest = entry.digest.clone();
                self.counters.requests_executed += 1;
                let reply = Message::SpecReply {
                    round: self.round,
                    client,
                    seq,
                    index: index as u64,
                    digest,
                    result,
                };
                out.send(client, Envelope::signed(reply, &self.key));
                if self.log.len() % self.cfg.checkpoint_interval == 0 {
                    self.do_sync(now, out);
                }
            }
        }
    }

    /// A duplicate of an executed request: repeat the reply it already got.
    fn reemit_reply(&mut self, client: NodeId, seq: u64, result: Vec<u8>, index: i64, out: &mut Outbox) {
        if index <= self.committed_watermark() || !self.log.covers(index) {
            let reply = Message::CommittedReply { round: self.round, client, seq, result };
            out.send(client, Envelope::signed(reply, &self.key));
        } else if let Some(digest) = self.log.digest_at(index) {
            let reply = Message::SpecReply {
                round: self.round,
                client,
                seq,
                index: index as u64,
                digest: digest.clone(),
                result,
            };
            out.send(client, Envelope::signed(reply, &self.key));
        }
    }

    // -- state reconstruction ------------------------------------------------

    /// Snapshot of replicated state as of log index `k`, rebuilt from the
    /// nearest cached snapshot plus replay when needed.
    pub(crate) fn state_at(&mut self, k: i64) -> Option<Vec<u8>> {
        if k == self.log.last_index() {
            return Some(self.exec.snapshot());
        }
        if let Some(s) = self.snapshots.get(&k) {
            return Some(s.clone());
        }
        if !self.log.covers(k) {
            return None;
        }
        // nearest snapshot at or below k
        let cached = self.snapshots.range(..=k).next_back().map(|(&i, s)| (i, s.clone()));
        let ckpt = (self.chkpt.index <= k).then(|| (self.chkpt.index, self.chkpt.snapshot.clone()));
        let (base_idx, base_snap) = match (cached, ckpt) {
            (Some(a), Some(b)) => Some(if a.0 >= b.0 { a } else { b }),
            (a, b) => a.or(b),
        }?;
        if base_idx < self.log.base_index() {
            return None;
        }
        let mut scratch = self.exec.fork();
        scratch.restore(&base_snap).ok()?;
        for (idx, e) in self.log.entries_from(base_idx + 1) {
            if idx > k {
                break;
            }
            scratch.execute(e.request.client, e.request.seq, &e.request.op, idx);
        }
        let snap = scratch.snapshot();
        self.snapshots.insert(k, snap.clone());
        Some(snap)
    }

    pub(crate) fn app_digest_of(&self, snap: &[u8]) -> HashDigest {
        digest(self.cfg.crypto, snap)
    }

    /// Drop snapshot cache entries below the committed watermark.
    pub(crate) fn gc_below(&mut self, index: i64) {
        self.snapshots.retain(|&i, _| i >= index);
        self.sync_q.retain(|&i, _| i > index);
        self.ckpt_q.retain(|&i, _| i > index);
        self.timeout_q.retain(|&i, _| i > index);
    }

    /// Replay buffered future-round messages once the round advances.
    pub(crate) fn replay_future(&mut self, now: Micros, out: &mut Outbox) {
        let ready: Vec<_> = std::mem::take(&mut self.future);
        for (from, env) in ready {
            if msg_round(&env.msg) == Some(self.round) {
                self.on_message(now, from, env, out);
            } else if msg_round(&env.msg).is_some_and(|r| r > self.round) {
                self.future.push((from, env));
            }
        }
    }
}

/// Round number carried by a message, when it has one.
fn msg_round(msg: &Message) -> Option<u64> {
    match msg {
        Message::Sync { round, .. }
        | Message::Checkpoint { round, .. }
        | Message::Timeout { round, .. }
        | Message::TimeoutProof { round, .. }
        | Message::ConflictProof { round, .. }
        | Message::Log { round, .. }
        | Message::RepairHistory { round, .. }
        | Message::RepairPrepare { round, .. }
        | Message::RepairCommit { round, .. }
        | Message::RepairDone { round, .. }
        | Message::ViewChange { round, .. }
        | Message::HistoryFetch { round }
        | Message::RepairFetch { round, .. }
        | Message::RepairFetchReply { round, .. } => Some(*round),
        Message::Request { .. }
        | Message::Stamped { .. }
        | Message::SpecReply { .. }
        | Message::CommittedReply { .. }
        | Message::StateRequest { .. }
        | Message::StateReply { .. }
        | Message::Probe { .. }
        | Message::ProbeReply { .. } => None,
    }
}
