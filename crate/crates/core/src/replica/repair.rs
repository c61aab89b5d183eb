//! Repair: the leader-based fallback that merges diverged logs and commits
//! them, plus the internal view change that replaces a stalled leader.
//!
//! Entering repair, a replica stops SYNC processing, queues client
//! requests, and sends the leader a LOG summary of its uncommitted
//! entries. The leader of view v (replica v mod n) gathers n-f LOGs into a
//! REPAIR-HISTORY; replicas run prepare and commit phases over its digest,
//! rebuild their logs from the merged history, answer every merged request
//! with COMMITTED-REPLY, publish REPAIR-DONE, and enter the next round.
//! f+1 REPAIR-DONEs let a straggler adopt the result directly.
//!
//! View changes carry the highest prepared certificate plus the sender's
//! original LOG, so a new leader either re-proposes the certified history
//! or assembles a fresh one.

use std::collections::{BTreeMap, BTreeSet};

use crate::crypto::{digest, HashDigest};
use crate::log::CheckpointState;
use crate::message::{Envelope, Message, PrepareCert, RequestId};
use crate::node::{Outbox, TimerKind};
use crate::trace::TraceEvent;
use crate::types::{Micros, NodeId, StampedRequest};
use crate::wire::{Wire, Writer};

use super::merge::{construct_new_log, LogView, MergedLog};
use super::{Mode, Replica};

#[derive(Debug, Clone)]
pub(crate) struct PreparedCert {
    pub view: u64,
    pub digest: HashDigest,
    pub history: Envelope,
    pub prepares: Vec<Envelope>,
}

#[derive(Debug)]
pub(crate) struct PendingCommit {
    pub digest: HashDigest,
    pub merged: MergedLog,
    pub views: Vec<LogView>,
    pub round_eta_star: Micros,
    pub commit_view: u64,
    pub have: BTreeMap<RequestId, StampedRequest>,
    pub missing: BTreeSet<RequestId>,
    pub need_state: bool,
    /// Fetched base state: (index, snapshot, chain digest, eta watermark,
    /// proof).
    pub state: Option<(i64, Vec<u8>, HashDigest, Micros, Vec<Envelope>)>,
    pub retry: u32,
}

/// Committed history of the previous round, retained to serve catch-up.
#[derive(Debug)]
pub(crate) struct LastCommitted {
    pub round: u64,
    pub view: u64,
    pub digest: HashDigest,
    pub history: Envelope,
    pub log_len: u64,
}

#[derive(Debug, Default)]
pub struct RepairState {
    /// Valid LOG messages in arrival order, one per sender.
    pub(crate) logs: Vec<Envelope>,
    pub(crate) own_log: Option<Envelope>,
    pub(crate) proposed_views: BTreeSet<u64>,
    pub(crate) proposal: Option<(HashDigest, Envelope)>,
    pub(crate) prepare_sent: BTreeSet<(u64, HashDigest)>,
    pub(crate) commit_sent: BTreeSet<(u64, HashDigest)>,
    pub(crate) prepares: BTreeMap<(u64, HashDigest), BTreeMap<u32, Envelope>>,
    pub(crate) commits: BTreeMap<(u64, HashDigest), BTreeSet<u32>>,
    pub(crate) prepared: Option<PreparedCert>,
    pub(crate) dones: BTreeMap<HashDigest, BTreeSet<u32>>,
    pub(crate) view_changes: BTreeMap<u64, BTreeMap<u32, Envelope>>,
    pub(crate) pending: Option<PendingCommit>,
    pub(crate) awaiting_history: Option<HashDigest>,
}

impl Replica {
    fn repair_mut(&mut self) -> &mut RepairState {
        self.repair.get_or_insert_with(RepairState::default)
    }

    fn rid_of(&self, request: &crate::types::ClientRequest) -> RequestId {
        RequestId {
            client: request.client,
            seq: request.seq,
            op_digest: digest(self.cfg.crypto, &request.op),
        }
    }

    /// Digest identifying a proposed history; stable under log reordering
    /// so re-proposals in later views keep the digest.
    pub(crate) fn history_digest(&self, logs: &[Envelope]) -> HashDigest {
        let mut sorted: Vec<&Envelope> = logs.iter().collect();
        sorted.sort_by_key(|e| e.sender);
        let mut w = Writer::new();
        w.put_u64(self.round);
        for env in sorted {
            env.encode(&mut w);
        }
        digest(self.cfg.crypto, &w.into_vec())
    }

    // -- entering ------------------------------------------------------------

    pub(crate) fn enter_repair(&mut self, now: Micros, out: &mut Outbox) {
        if self.mode.in_repair() || self.halted.is_some() {
            return;
        }
        if self.mode == Mode::Aligning {
            self.align = None;
            self.disarm(out, TimerKind::AlignRetry);
        }
        self.mode = Mode::Repair;
        self.counters.repairs_entered += 1;
        self.trace_mode(out);
        self.disarm(out, TimerKind::Sync);
        let started: Vec<i64> = self.chkpt_timer_started.iter().copied().collect();
        for k in started {
            self.disarm(out, TimerKind::Chkpt(k));
        }

        let base = self.committed_watermark();
        let base_digest = self.log.digest_at(base).expect("committed base covered").clone();
        let base_proof = if base == self.chkpt.index && base > self.start_idx as i64 - 1 {
            self.chkpt.proof.clone()
        } else {
            Vec::new()
        };
        let msg = Message::Log {
            view: self.view,
            round: self.round,
            base_index: base,
            base_digest,
            base_proof,
            eta_star: self.eta_seen,
            entries: self.log.summary_from(base),
        };
        let env = Envelope::signed(msg, &self.key);
        self.repair_mut().own_log = Some(env.clone());
        let leader = self.cfg.leader_of(self.view);
        if leader == self.index {
            self.record_log(env);
        } else {
            out.send(NodeId::Replica(leader), env);
        }
        self.arm(out, TimerKind::ViewChange, now + self.cfg.view_change_timeout_us());
        self.maybe_propose(now, out);
    }

    // -- LOG collection and proposal ------------------------------------------

    /// Validate a LOG message: signature, round, and a justified committed
    /// base (the round boundary, or a checkpoint proof).
    pub(crate) fn validate_log_env(&self, env: &Envelope) -> Option<LogView> {
        let Message::Log { round, base_index, base_digest, base_proof, eta_star, entries, .. } =
            &env.msg
        else {
            return None;
        };
        if *round != self.round || !env.verify(&self.ring) {
            return None;
        }
        let sender = env.sender.replica_index()?;
        let boundary = self.start_idx as i64 - 1;
        if *base_index < boundary {
            return None;
        }
        if *base_index == boundary {
            // the round boundary is common knowledge; reject contradictions
            if self.log.covers(boundary) && self.log.digest_at(boundary) != Some(base_digest) {
                return None;
            }
        } else {
            let (d, _, _) = self.validate_sync_set(*base_index, base_proof)?;
            if &d != base_digest {
                return None;
            }
        }
        Some(LogView {
            sender,
            base_index: *base_index,
            base_digest: base_digest.clone(),
            eta_star: *eta_star,
            entries: entries.clone(),
        })
    }

    fn record_log(&mut self, env: Envelope) {
        let rs = self.repair_mut();
        if rs.logs.iter().any(|e| e.sender == env.sender) {
            return;
        }
        rs.logs.push(env);
    }

    pub(crate) fn on_log(&mut self, now: Micros, env: Envelope, out: &mut Outbox) {
        if self.validate_log_env(&env).is_none() {
            self.counters.invalid_proof_dropped += 1;
            return;
        }
        self.record_log(env);
        if self.mode == Mode::Repair {
            self.maybe_propose(now, out);
        }
    }

    fn maybe_propose(&mut self, now: Micros, out: &mut Outbox) {
        if self.mode != Mode::Repair || self.cfg.leader_of(self.view) != self.index {
            return;
        }
        let quorum = self.cfg.strong_quorum();
        let view = self.view;
        let rs = self.repair_mut();
        if rs.logs.len() < quorum || !rs.proposed_views.insert(view) {
            return;
        }
        // first n-f valid LOGs in arrival order
        let logs: Vec<Envelope> = rs.logs.iter().take(quorum).cloned().collect();
        let msg = Message::RepairHistory {
            round: self.round,
            view,
            logs,
            view_change_proof: Vec::new(),
        };
        let env = Envelope::signed(msg, &self.key);
        out.broadcast_except(self.cfg.n(), self.index, env.clone());
        self.on_repair_history(now, env, out);
    }

    // -- proposal handling ------------------------------------------------------

    pub(crate) fn on_repair_history(&mut self, now: Micros, env: Envelope, out: &mut Outbox) {
        let Message::RepairHistory { round: _, view: v, logs, view_change_proof } =
            env.msg.clone()
        else {
            return;
        };
        if env.sender != NodeId::Replica(self.cfg.leader_of(v)) {
            return;
        }
        // A valid proposal implies a live repair round.
        if !self.mode.in_repair() {
            self.enter_repair(now, out);
        }
        let h = self.history_digest(&logs);
        let awaiting = self.repair_mut().awaiting_history.as_ref() == Some(&h);

        if !awaiting {
            if v < self.view {
                self.counters.stale_dropped += 1;
                return;
            }
            if v > self.view || self.mode == Mode::ViewChange {
                // a proposal from a later view (or one pulling us out of a
                // view change) must justify itself with n-f VIEW-CHANGEs
                if !self.validate_new_view_proof(v, &h, &view_change_proof) {
                    self.counters.invalid_proof_dropped += 1;
                    return;
                }
                self.view = v;
                self.mode = Mode::Repair;
                self.trace_mode(out);
                self.arm(out, TimerKind::ViewChange, now + self.cfg.view_change_timeout_us());
            }
        }

        // validate the history body
        let quorum = self.cfg.strong_quorum();
        let mut views = Vec::new();
        let mut senders = BTreeSet::new();
        for log_env in &logs {
            if let Some(view) = self.validate_log_env(log_env) {
                senders.insert(view.sender);
                views.push(view);
            }
        }
        if views.len() < quorum || senders.len() < quorum {
            // a provably bad proposal from the leader of our view
            self.counters.invalid_proof_dropped += 1;
            if !awaiting && v == self.view {
                self.start_view_change_to(now, self.view + 1, out);
            }
            return;
        }

        let rs = self.repair_mut();
        rs.proposal = Some((h.clone(), env));
        if awaiting {
            self.begin_commit(now, h, out);
            return;
        }
        let index = self.index;
        if self.repair_mut().prepare_sent.insert((v, h.clone())) {
            let msg = Message::RepairPrepare { round: self.round, view: v, history_digest: h.clone() };
            let penv = Envelope::signed(msg, &self.key);
            self.repair_mut()
                .prepares
                .entry((v, h.clone()))
                .or_default()
                .insert(index, penv.clone());
            out.broadcast_except(self.cfg.n(), index, penv);
        }
        self.check_prepare_quorum(now, v, h.clone(), out);
        self.check_commit_quorum(now, v, h, out);
    }

    pub(crate) fn on_repair_prepare(
        &mut self,
        now: Micros,
        env: &Envelope,
        view: u64,
        h: HashDigest,
        out: &mut Outbox,
    ) {
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        self.repair_mut()
            .prepares
            .entry((view, h.clone()))
            .or_default()
            .insert(sender, env.clone());
        self.check_prepare_quorum(now, view, h, out);
    }

    fn check_prepare_quorum(&mut self, now: Micros, v: u64, h: HashDigest, out: &mut Outbox) {
        if !self.mode.in_repair() || v != self.view {
            return;
        }
        let quorum = self.cfg.strong_quorum();
        let index = self.index;
        let rs = self.repair_mut();
        if rs.proposal.as_ref().map(|(d, _)| d) != Some(&h) {
            return;
        }
        let Some(prepares) = rs.prepares.get(&(v, h.clone())) else {
            return;
        };
        if prepares.len() < quorum {
            return;
        }
        if rs.prepared.as_ref().map_or(true, |pc| pc.view < v) {
            rs.prepared = Some(PreparedCert {
                view: v,
                digest: h.clone(),
                history: rs.proposal.as_ref().unwrap().1.clone(),
                prepares: prepares.values().cloned().collect(),
            });
        }
        if rs.commit_sent.insert((v, h.clone())) {
            rs.commits.entry((v, h.clone())).or_default().insert(index);
            let msg = Message::RepairCommit { round: self.round, view: v, history_digest: h.clone() };
            let cenv = Envelope::signed(msg, &self.key);
            out.broadcast_except(self.cfg.n(), index, cenv);
        }
        self.check_commit_quorum(now, v, h, out);
    }

    pub(crate) fn on_repair_commit(
        &mut self,
        now: Micros,
        env: &Envelope,
        view: u64,
        h: HashDigest,
        out: &mut Outbox,
    ) {
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        self.repair_mut().commits.entry((view, h.clone())).or_default().insert(sender);
        self.check_commit_quorum(now, view, h, out);
    }

    fn check_commit_quorum(&mut self, now: Micros, v: u64, h: HashDigest, out: &mut Outbox) {
        if !self.mode.in_repair() || v != self.view {
            return;
        }
        let quorum = self.cfg.strong_quorum();
        let rs = self.repair_mut();
        if rs.pending.is_some()
            || rs.proposal.as_ref().map(|(d, _)| d) != Some(&h)
            || rs.commits.get(&(v, h.clone())).map_or(0, |s| s.len()) < quorum
        {
            return;
        }
        self.begin_commit(now, h, out);
    }

    // -- committing the history ---------------------------------------------------

    fn merged_digest_at<'a>(merged: &'a MergedLog, k: i64) -> Option<&'a HashDigest> {
        if k == merged.base_index {
            Some(&merged.base_digest)
        } else if k > merged.base_index {
            merged.preserved.get((k - merged.base_index - 1) as usize).map(|e| &e.digest)
        } else {
            None
        }
    }

    fn begin_commit(&mut self, now: Micros, h: HashDigest, out: &mut Outbox) {
        let Some((ph, env)) = self.repair_mut().proposal.clone() else {
            return;
        };
        if ph != h || self.repair_mut().pending.is_some() {
            return;
        }
        let Message::RepairHistory { logs, view: commit_view, .. } = &env.msg else {
            return;
        };
        let commit_view = *commit_view;
        let views: Vec<LogView> =
            logs.iter().filter_map(|e| self.validate_log_env(e)).collect();
        let merged = match construct_new_log(self.cfg.f, self.cfg.p, &views) {
            Ok(m) => m,
            Err(_) => {
                self.start_view_change_to(now, self.view + 1, out);
                return;
            }
        };
        let round_eta_star = views.iter().map(|v| v.eta_star).max().unwrap_or(0);

        // Cross-check the merge against our committed prefix: conflicts here
        // would mean two committed histories disagree.
        let wm = self.committed_watermark();
        let anchor = merged.base_index.max(self.log.base_index());
        if anchor <= wm {
            for k in anchor..=wm {
                let ours = self.log.digest_at(k);
                match Self::merged_digest_at(&merged, k) {
                    Some(d) if ours == Some(d) => {}
                    _ => {
                        self.halt(out, format!("committed history conflict at index {k}"));
                        return;
                    }
                }
            }
        }
        let need_state = !(self.log.covers(merged.base_index)
            && self.log.digest_at(merged.base_index) == Some(&merged.base_digest));

        let mut have: BTreeMap<RequestId, StampedRequest> = BTreeMap::new();
        for (_, e) in self.log.entries_from(self.log.base_index() + 1) {
            have.insert(self.rid_of(&e.request), e.stamped());
        }
        for sr in self.release.iter() {
            have.insert(self.rid_of(&sr.request), sr.clone());
        }
        let missing: BTreeSet<RequestId> =
            merged.ordered_ids().filter(|rid| !have.contains_key(rid)).collect();

        self.repair_mut().pending = Some(PendingCommit {
            digest: h,
            merged,
            views,
            round_eta_star,
            commit_view,
            have,
            missing,
            need_state,
            state: None,
            retry: 0,
        });
        self.drive_pending(now, out);
    }

    /// Issue whatever fetches the pending commit still needs, or apply it.
    fn drive_pending(&mut self, now: Micros, out: &mut Outbox) {
        let Some(pending) = self.repair_mut().pending.take() else {
            return;
        };
        if pending.missing.is_empty() && (!pending.need_state || pending.state.is_some()) {
            self.apply_commit(now, pending, out);
            return;
        }
        let rotation = pending.retry as usize;
        // request bodies from replicas whose LOGs listed them
        let mut per_holder: BTreeMap<u32, Vec<RequestId>> = BTreeMap::new();
        for rid in &pending.missing {
            let holders: Vec<u32> = pending
                .views
                .iter()
                .filter(|v| v.entries.iter().any(|e| e.rid() == *rid))
                .map(|v| v.sender)
                .collect();
            if holders.is_empty() {
                continue;
            }
            let holder = holders[rotation % holders.len()];
            per_holder.entry(holder).or_default().push(rid.clone());
        }
        for (holder, needs) in per_holder {
            let msg = Message::RepairFetch { round: self.round, needs };
            out.send(NodeId::Replica(holder), Envelope::unsigned(msg, self.id));
        }
        if pending.need_state && pending.state.is_none() {
            let claimers: Vec<u32> = pending
                .views
                .iter()
                .filter(|v| v.base_index == pending.merged.base_index)
                .map(|v| v.sender)
                .collect();
            if !claimers.is_empty() {
                let target = claimers[rotation % claimers.len()];
                let msg = Message::StateRequest { index: pending.merged.base_index };
                out.send(NodeId::Replica(target), Envelope::unsigned(msg, self.id));
            }
        }
        self.repair_mut().pending = Some(pending);
        self.arm(out, TimerKind::RepairRetry, now + self.cfg.chkpt_timeout_us());
    }

    pub(crate) fn on_repair_retry(&mut self, now: Micros, out: &mut Outbox) {
        if !self.mode.in_repair() {
            return;
        }
        let rs = self.repair_mut();
        if let Some(p) = rs.pending.as_mut() {
            p.retry += 1;
            self.drive_pending(now, out);
            return;
        }
        // still waiting for a fetched history
        if let Some(h) = rs.awaiting_history.clone() {
            let holders: Vec<u32> = rs.dones.get(&h).map(|s| s.iter().copied().collect()).unwrap_or_default();
            if !holders.is_empty() {
                let msg = Message::HistoryFetch { round: self.round };
                out.send(NodeId::Replica(holders[0]), Envelope::unsigned(msg, self.id));
            }
            self.arm(out, TimerKind::RepairRetry, now + self.cfg.chkpt_timeout_us());
        }
    }

    pub(crate) fn on_repair_fetch(
        &mut self,
        from: NodeId,
        round: u64,
        needs: Vec<RequestId>,
        out: &mut Outbox,
    ) {
        // serve our current round and the one we just finished
        if round != self.round && round + 1 != self.round {
            return;
        }
        let mut found = Vec::new();
        for (_, e) in self.log.entries_from(self.log.base_index() + 1) {
            if needs.contains(&self.rid_of(&e.request)) {
                found.push(e.stamped());
            }
        }
        for sr in self.release.iter() {
            if needs.contains(&self.rid_of(&sr.request)) {
                found.push(sr.clone());
            }
        }
        if !found.is_empty() {
            let msg = Message::RepairFetchReply { round, requests: found };
            out.send(from, Envelope::signed(msg, &self.key));
        }
    }

    pub(crate) fn on_repair_fetch_reply(
        &mut self,
        now: Micros,
        requests: Vec<StampedRequest>,
        out: &mut Outbox,
    ) {
        if self.repair.as_ref().and_then(|r| r.pending.as_ref()).is_none() {
            return;
        }
        let verified: Vec<(RequestId, StampedRequest)> = requests
            .into_iter()
            .filter(|sr| sr.request.verify(&self.ring))
            .map(|sr| (self.rid_of(&sr.request), sr))
            .collect();
        let rs = self.repair_mut();
        let Some(pending) = rs.pending.as_mut() else {
            return;
        };
        let mut advanced = false;
        for (rid, sr) in verified {
            if pending.missing.remove(&rid) {
                pending.have.insert(rid, sr);
                advanced = true;
            }
        }
        if advanced {
            self.drive_pending(now, out);
        }
    }

    /// STATE-REPLY while repairing: the merged base lies beyond our chain,
    /// adopt the claimed checkpoint after verifying it against the history.
    pub(crate) fn on_repair_state_reply(
        &mut self,
        now: Micros,
        index: i64,
        snapshot: Vec<u8>,
        proof: Vec<Envelope>,
        out: &mut Outbox,
    ) {
        let Some(pending) = self.repair.as_ref().and_then(|r| r.pending.as_ref()) else {
            return;
        };
        if !pending.need_state || pending.state.is_some() || index < pending.merged.base_index {
            return;
        }
        let Some((d, eta_star)) = self.validate_checkpoint_proof(index, &snapshot, &proof) else {
            self.counters.invalid_proof_dropped += 1;
            return;
        };
        if Self::merged_digest_at(&pending.merged, index) != Some(&d) {
            self.counters.invalid_proof_dropped += 1;
            return;
        }
        let rs = self.repair_mut();
        if let Some(p) = rs.pending.as_mut() {
            p.state = Some((index, snapshot, d, eta_star, proof));
        }
        self.drive_pending(now, out);
    }

    fn apply_commit(&mut self, now: Micros, pending: PendingCommit, out: &mut Outbox) {
        let merged = &pending.merged;
        let base = merged.base_index;
        let last = base + merged.len_above_base() as i64;
        let mut pool: Vec<StampedRequest> = Vec::new();

        // 1. establish the base state and the rollback point
        let apply_from = if let Some((k, snapshot, d, eta_star, proof)) = pending.state {
            pool.extend(self.log.rebase(k, d.clone(), eta_star).into_iter().map(|e| e.stamped()));
            if self.exec.restore(&snapshot).is_err() {
                self.halt(out, "failed to restore fetched base state".into());
                return;
            }
            self.chkpt = CheckpointState { index: k, proof, snapshot, eta_star };
            self.traced_committed = self.traced_committed.max(k);
            out.trace(TraceEvent::CommitWatermark { replica: self.id, index: k, digest: d });
            k + 1
        } else {
            // first index where our log disagrees with the merged one
            let mut j = base + 1;
            while j <= last.min(self.log.last_index()) {
                let Some(entry) = self.log.entry(j) else {
                    break;
                };
                let pos = (j - base - 1) as usize;
                let matches = if pos < merged.preserved.len() {
                    entry.digest == merged.preserved[pos].digest
                } else {
                    let rid = &merged.appended[pos - merged.preserved.len()];
                    self.rid_of(&entry.request) == *rid
                };
                if !matches {
                    break;
                }
                j += 1;
            }
            let rollback_to = j - 1;
            if rollback_to < self.log.last_index() {
                let Some(state) = self.state_at(rollback_to) else {
                    self.halt(out, "no snapshot available for rollback".into());
                    return;
                };
                if self.exec.restore(&state).is_err() {
                    self.halt(out, "failed to restore rollback state".into());
                    return;
                }
                pool.extend(self.log.truncate_to(rollback_to).into_iter().map(|e| e.stamped()));
            }
            j
        };

        // 2. re-apply the merged log
        for k in apply_from..=last {
            let pos = (k - base - 1) as usize;
            let (rid, expected) = if pos < merged.preserved.len() {
                let e = &merged.preserved[pos];
                (e.rid(), Some(e.digest.clone()))
            } else {
                (merged.appended[pos - merged.preserved.len()].clone(), None)
            };
            let Some(sr) = pending.have.get(&rid) else {
                self.halt(out, format!("request body missing for committed entry {k}"));
                return;
            };
            let client = sr.request.client;
            let seq = sr.request.seq;
            let (result, mutated) = self.exec.execute(client, seq, &sr.request.op, k);
            self.exec.relocate(client, seq, k);
            self.eta_seen = self.eta_seen.max(sr.eta);
            self.log.append(sr.request.clone(), sr.eta, sr.proxy, result, mutated);
            if let Some(expected) = expected {
                if self.log.digest_at(k) != Some(&expected) {
                    self.halt(out, format!("rebuilt chain diverges from history at {k}"));
                    return;
                }
            }
        }

        // 3. committed entries: trace them and answer every client
        self.trace_committed_entries(out, last);
        let replies: Vec<(NodeId, Message)> = self
            .log
            .entries_from(base + 1)
            .map(|(_, e)| {
                (e.request.client, Message::CommittedReply {
                    round: self.round,
                    client: e.request.client,
                    seq: e.request.seq,
                    result: e.result.clone(),
                })
            })
            .collect();
        for (client, msg) in replies {
            out.send(client, Envelope::signed(msg, &self.key));
        }

        // 4. requeue what the merge excluded; the round watermark guards
        // against double-applying checkpoint-covered requests
        let merged_ids: BTreeSet<RequestId> = merged.ordered_ids().collect();
        let round_eta_star = pending.round_eta_star;
        for sr in pool {
            let rid = self.rid_of(&sr.request);
            if merged_ids.contains(&rid) {
                continue;
            }
            if sr.eta > round_eta_star {
                self.release.enqueue(sr, now, self.cfg.eta_overwrite_threshold_us());
            } else {
                self.counters.eta_guard_dropped += 1;
            }
        }
        let dropped = self.release.drop_eta_at_or_below(round_eta_star);
        self.counters.eta_guard_dropped += dropped as u64;

        // 5. publish REPAIR-DONE and enter the next round
        let done = Message::RepairDone {
            round: self.round,
            view: pending.commit_view,
            log_len: self.log.len(),
            history_digest: pending.digest.clone(),
        };
        out.broadcast_except(self.cfg.n(), self.index, Envelope::signed(done, &self.key));
        out.trace(TraceEvent::RepairCommitted {
            replica: self.id,
            round: self.round,
            view: pending.commit_view,
            log_len: self.log.len(),
        });
        let history = self.repair_mut().proposal.as_ref().map(|(_, e)| e.clone());
        self.last_committed = Some(LastCommitted {
            round: self.round,
            view: pending.commit_view,
            digest: pending.digest,
            history: history.expect("proposal present at commit"),
            log_len: self.log.len(),
        });

        self.round += 1;
        self.start_idx = self.log.len();
        self.eta_seen = self.eta_seen.max(round_eta_star);
        self.counters.rounds_completed += 1;
        self.repair = None;
        self.synced.clear();
        self.sync_q.clear();
        self.ckpt_q.clear();
        self.timeout_q.clear();
        self.chkpt_timer_started.clear();
        self.timeout_sent.clear();
        self.proof_sent.clear();
        self.disarm(out, TimerKind::ViewChange);
        self.disarm(out, TimerKind::RepairRetry);
        self.mode = Mode::Normal;
        self.trace_mode(out);
        self.arm(out, TimerKind::Sync, now + self.cfg.sync_timeout_us());
        self.replay_future(now, out);
        self.pump_release(now, out);
    }

    // -- REPAIR-DONE catch-up -------------------------------------------------

    pub(crate) fn on_repair_done(
        &mut self,
        now: Micros,
        env: &Envelope,
        _view: u64,
        h: HashDigest,
        out: &mut Outbox,
    ) {
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        let rs = self.repair_mut();
        rs.dones.entry(h.clone()).or_default().insert(sender);
        let count = rs.dones[&h].len();
        if count < self.cfg.weak_quorum() {
            return;
        }
        // f+1 replicas finished this round with history h: adopt it
        if !self.mode.in_repair() {
            self.enter_repair(now, out);
        }
        let rs = self.repair_mut();
        if rs.pending.is_some() {
            return;
        }
        if rs.proposal.as_ref().map(|(d, _)| d) == Some(&h) {
            self.begin_commit(now, h, out);
            return;
        }
        if let Some(pc) = rs.prepared.as_ref().filter(|pc| pc.digest == h) {
            let history = pc.history.clone();
            rs.proposal = Some((h.clone(), history));
            self.begin_commit(now, h, out);
            return;
        }
        if rs.awaiting_history.is_none() {
            rs.awaiting_history = Some(h);
            let msg = Message::HistoryFetch { round: self.round };
            out.send(NodeId::Replica(sender), Envelope::unsigned(msg, self.id));
            self.arm(out, TimerKind::RepairRetry, now + self.cfg.chkpt_timeout_us());
        }
    }

    pub(crate) fn on_history_fetch(&mut self, from: NodeId, round: u64, out: &mut Outbox) {
        if let Some(lc) = self.last_committed.as_ref().filter(|lc| lc.round == round) {
            out.send(from, lc.history.clone());
            let done = Message::RepairDone {
                round: lc.round,
                view: lc.view,
                log_len: lc.log_len,
                history_digest: lc.digest.clone(),
            };
            out.send(from, Envelope::signed(done, &self.key));
            return;
        }
        if round == self.round {
            if let Some((_, env)) = self.repair.as_ref().and_then(|r| r.proposal.clone()) {
                out.send(from, env);
            }
        }
    }

    /// A view change for a round we already finished: answer with the
    /// committed outcome instead of rolling back.
    pub(crate) fn answer_old_round_view_change(&mut self, from: NodeId, out: &mut Outbox) {
        if let Some(lc) = self.last_committed.as_ref() {
            let round = lc.round;
            self.on_history_fetch(from, round, out);
        }
    }

    // -- internal view change ---------------------------------------------------

    pub(crate) fn on_view_change_timer(&mut self, now: Micros, out: &mut Outbox) {
        if self.mode.in_repair() {
            self.start_view_change_to(now, self.view + 1, out);
        }
    }

    pub(crate) fn start_view_change_to(&mut self, now: Micros, v: u64, out: &mut Outbox) {
        if !self.mode.in_repair() || v <= self.view {
            return;
        }
        self.view = v;
        self.mode = Mode::ViewChange;
        self.trace_mode(out);
        let rs = self.repair_mut();
        let Some(own_log) = rs.own_log.clone() else {
            return;
        };
        let prepared = rs.prepared.as_ref().map(|pc| PrepareCert {
            view: pc.view,
            history_digest: pc.digest.clone(),
            history: Box::new(pc.history.clone()),
            prepares: pc.prepares.clone(),
        });
        let msg = Message::ViewChange {
            round: self.round,
            new_view: v,
            prepared,
            log: Box::new(own_log),
        };
        let env = Envelope::signed(msg, &self.key);
        let index = self.index;
        self.repair_mut().view_changes.entry(v).or_default().insert(index, env.clone());
        out.broadcast_except(self.cfg.n(), index, env);
        self.arm(out, TimerKind::ViewChange, now + self.cfg.view_change_timeout_us());
        self.check_new_view(now, v, out);
    }

    fn validate_prepare_cert(&self, cert: &PrepareCert) -> bool {
        let Message::RepairHistory { round, view, logs, .. } = &cert.history.msg else {
            return false;
        };
        if *round != self.round
            || *view != cert.view
            || cert.history.sender != NodeId::Replica(self.cfg.leader_of(cert.view))
            || !cert.history.verify(&self.ring)
            || self.history_digest(logs) != cert.history_digest
        {
            return false;
        }
        let mut senders = BTreeSet::new();
        for p in &cert.prepares {
            let Message::RepairPrepare { round: r, view: v, history_digest: h } = &p.msg else {
                return false;
            };
            if *r != self.round || *v != cert.view || h != &cert.history_digest || !p.verify(&self.ring) {
                return false;
            }
            let Some(s) = p.sender.replica_index() else {
                return false;
            };
            senders.insert(s);
        }
        senders.len() >= self.cfg.strong_quorum()
    }

    fn validate_view_change_env(&self, env: &Envelope, expect_view: u64) -> bool {
        let Message::ViewChange { round, new_view, prepared, log } = &env.msg else {
            return false;
        };
        if *round != self.round || *new_view != expect_view || !env.verify(&self.ring) {
            return false;
        }
        if log.sender != env.sender || self.validate_log_env(log).is_none() {
            return false;
        }
        if let Some(cert) = prepared {
            if !self.validate_prepare_cert(cert) {
                return false;
            }
        }
        true
    }

    /// Proof that view v started: n-f valid VIEW-CHANGEs, and the proposal
    /// honors the freshest prepared certificate among them.
    fn validate_new_view_proof(&self, v: u64, proposed: &HashDigest, proof: &[Envelope]) -> bool {
        let mut senders = BTreeSet::new();
        let mut best_cert: Option<&PrepareCert> = None;
        for env in proof {
            if !self.validate_view_change_env(env, v) {
                return false;
            }
            if let Some(s) = env.sender.replica_index() {
                senders.insert(s);
            }
            if let Message::ViewChange { prepared: Some(c), .. } = &env.msg {
                if best_cert.map_or(true, |b| b.view < c.view) {
                    best_cert = Some(c);
                }
            }
        }
        if senders.len() < self.cfg.strong_quorum() {
            return false;
        }
        match best_cert {
            Some(c) => &c.history_digest == proposed,
            None => true,
        }
    }

    pub(crate) fn on_view_change(&mut self, now: Micros, env: Envelope, out: &mut Outbox) {
        let Message::ViewChange { new_view: v, .. } = env.msg else {
            return;
        };
        if !self.validate_view_change_env(&env, v) {
            self.counters.invalid_proof_dropped += 1;
            return;
        }
        let sender = env.sender.replica_index().unwrap();
        self.repair_mut().view_changes.entry(v).or_default().insert(sender, env);

        // join rule: f+1 replicas moved past our view
        let my_view = self.view;
        let weak = self.cfg.weak_quorum();
        let join = self
            .repair_mut()
            .view_changes
            .iter()
            .filter(|(v2, m)| **v2 > my_view && m.len() >= weak)
            .map(|(v2, _)| *v2)
            .max();
        if let Some(v2) = join {
            if !self.mode.in_repair() {
                self.enter_repair(now, out);
            }
            self.start_view_change_to(now, v2, out);
        }
        self.check_new_view(now, v, out);
    }

    fn check_new_view(&mut self, now: Micros, v: u64, out: &mut Outbox) {
        if v != self.view
            || self.cfg.leader_of(v) != self.index
            || !self.mode.in_repair()
        {
            return;
        }
        let quorum = self.cfg.strong_quorum();
        let rs = self.repair_mut();
        if rs.proposed_views.contains(&v) {
            return;
        }
        let Some(vcs) = rs.view_changes.get(&v) else {
            return;
        };
        if vcs.len() < quorum {
            return;
        }
        // re-propose the freshest prepared history, or build one from the
        // attached LOGs
        let mut best_cert: Option<&PrepareCert> = None;
        for env in vcs.values() {
            if let Message::ViewChange { prepared: Some(c), .. } = &env.msg {
                if best_cert.map_or(true, |b| b.view < c.view) {
                    best_cert = Some(c);
                }
            }
        }
        let logs: Vec<Envelope> = match best_cert {
            Some(c) => match &c.history.msg {
                Message::RepairHistory { logs, .. } => logs.clone(),
                _ => return,
            },
            None => vcs
                .values()
                .map(|env| match &env.msg {
                    Message::ViewChange { log, .. } => (**log).clone(),
                    _ => unreachable!("validated view change"),
                })
                .take(quorum)
                .collect(),
        };
        let proof: Vec<Envelope> = vcs.values().cloned().collect();
        rs.proposed_views.insert(v);
        let msg = Message::RepairHistory {
            round: self.round,
            view: v,
            logs,
            view_change_proof: proof,
        };
        let env = Envelope::signed(msg, &self.key);
        out.broadcast_except(self.cfg.n(), self.index, env.clone());
        self.on_repair_history(now, env, out);
    }
}
