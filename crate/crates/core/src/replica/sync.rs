//! Checkpoint subprotocol: periodic log synchronization, checkpoint
//! formation, conflict proofs, and the timeout cascade into repair.
//!
//! Synchronization triggers when the log length reaches a multiple of the
//! checkpoint interval or the sync timer fires. For any index under
//! synchronization there are three outcomes: a checkpoint (n-p consistent
//! SYNCs matching the local chain), alignment (f+1 consistent CHECKPOINTs
//! conflicting with the local chain), or repair (checkpoint timeout or a
//! proof that no checkpoint can form).

use std::collections::BTreeMap;

use crate::crypto::HashDigest;
use crate::log::CheckpointState;
use crate::message::{Envelope, Message};
use crate::node::{Outbox, TimerKind};
use crate::trace::TraceEvent;
use crate::types::Micros;

use super::{Mode, Replica, SyncRec};

impl Replica {
    /// Broadcast a SYNC for the current log head, snapshotting app state.
    pub(crate) fn do_sync(&mut self, now: Micros, out: &mut Outbox) {
        self.arm(out, TimerKind::Sync, now + self.cfg.sync_timeout_us());
        if self.mode != Mode::Normal {
            return;
        }
        let k = self.log.last_index();
        if k < 0 {
            return;
        }
        self.broadcast_sync_at(now, k, out);
    }

    /// SYNC at a specific index (own head or an echo of someone else's
    /// off-interval index).
    fn broadcast_sync_at(&mut self, now: Micros, k: i64, out: &mut Outbox) {
        let Some(snap) = self.state_at(k) else {
            return;
        };
        let app_digest = self.app_digest_of(&snap);
        let digest = self.log.digest_at(k).expect("covered index").clone();
        let eta_star = self.log.eta_max_at(k).unwrap_or(0);
        let msg = Message::Sync {
            round: self.round,
            index: k,
            digest: digest.clone(),
            eta_star,
            app_digest: app_digest.clone(),
        };
        let env = Envelope::signed(msg, &self.key);
        self.synced.insert(k);
        self.sync_q.entry(k).or_default().insert(
            self.index,
            SyncRec { digest, app_digest, eta_star, env: env.clone() },
        );
        out.broadcast_except(self.cfg.n(), self.index, env);
        self.run_sync_checks(now, k, out);
    }

    pub(crate) fn on_sync(
        &mut self,
        now: Micros,
        env: &Envelope,
        index: i64,
        digest: HashDigest,
        eta_star: Micros,
        app_digest: HashDigest,
        out: &mut Outbox,
    ) {
        // Repair stops SYNC processing; alignment keeps answering.
        if self.mode.in_repair() {
            self.counters.stale_dropped += 1;
            return;
        }
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        if index <= self.chkpt.index {
            return;
        }
        // Echo: a SYNC for an index inside our log that we never synced
        // ourselves (timeout-triggered indexes differ across replicas).
        if index < self.log.last_index()
            && !self.synced.contains(&index)
            && self.log.covers(index)
            && self.mode == Mode::Normal
        {
            self.broadcast_sync_at(now, index, out);
        }
        self.sync_q.entry(index).or_default().insert(
            sender,
            SyncRec { digest, app_digest, eta_star, env: env.clone() },
        );
        self.run_sync_checks(now, index, out);
    }

    /// Consistent-group bookkeeping shared by checkpoint formation and
    /// conflict detection. Consistency is equality of (digest, app digest).
    fn largest_group(records: &BTreeMap<u32, SyncRec>) -> (usize, Option<(HashDigest, HashDigest)>) {
        let mut groups: BTreeMap<(&HashDigest, &HashDigest), usize> = BTreeMap::new();
        for rec in records.values() {
            *groups.entry((&rec.digest, &rec.app_digest)).or_default() += 1;
        }
        groups
            .into_iter()
            .max_by_key(|((d, a), n)| (*n, (*d).clone(), (*a).clone()))
            .map(|((d, a), n)| (n, Some((d.clone(), a.clone()))))
            .unwrap_or((0, None))
    }

    pub(crate) fn run_sync_checks(&mut self, now: Micros, k: i64, out: &mut Outbox) {
        if k <= self.chkpt.index || self.mode.in_repair() {
            return;
        }
        let (m, c, best) = match self.sync_q.get(&k) {
            Some(records) => {
                let (c, best) = Self::largest_group(records);
                (records.len(), c, best)
            }
            None => return,
        };

        // enough total-but-inconsistent SYNCs: start the checkpoint timer
        if m >= self.cfg.strong_quorum() && self.chkpt_timer_started.insert(k) {
            self.arm(out, TimerKind::Chkpt(k), now + self.cfg.chkpt_timeout_us());
        }

        // checkpoint: a fast quorum agreeing with our own chain
        if c >= self.cfg.fast_quorum() {
            if let Some((d, a)) = best.clone() {
                if self.log.covers(k) && self.log.digest_at(k) == Some(&d) {
                    let records = &self.sync_q[&k];
                    let proof: Vec<Envelope> = records
                        .values()
                        .filter(|r| r.digest == d && r.app_digest == a)
                        .take(self.cfg.fast_quorum())
                        .map(|r| r.env.clone())
                        .collect();
                    let eta_star = records
                        .values()
                        .filter(|r| r.digest == d)
                        .map(|r| r.eta_star)
                        .max()
                        .unwrap_or(0);
                    self.install_checkpoint(k, d.clone(), proof, eta_star, out);
                    let msg = Message::Checkpoint {
                        round: self.round,
                        index: k,
                        digest: d,
                        app_digest: a,
                    };
                    out.broadcast_except(self.cfg.n(), self.index, Envelope::signed(msg, &self.key));
                    return;
                }
            }
        }

        // conflict proof: the unseen messages cannot complete a quorum
        if (self.cfg.n() as i64 - m as i64) < (self.cfg.fast_quorum() as i64 - c as i64)
            && self.proof_sent.insert(k)
        {
            let syncs: Vec<Envelope> =
                self.sync_q[&k].values().map(|r| r.env.clone()).collect();
            let msg = Message::ConflictProof { round: self.round, index: k, syncs };
            out.broadcast_except(self.cfg.n(), self.index, Envelope::unsigned(msg, self.id));
            self.enter_repair(now, out);
        }
    }

    pub(crate) fn install_checkpoint(
        &mut self,
        k: i64,
        digest: HashDigest,
        proof: Vec<Envelope>,
        eta_star: Micros,
        out: &mut Outbox,
    ) {
        if k <= self.chkpt.index {
            return;
        }
        let Some(snapshot) = self.state_at(k) else {
            return;
        };
        self.chkpt = CheckpointState { index: k, proof, snapshot, eta_star };
        self.trace_committed_entries(out, k);
        out.trace(TraceEvent::CheckpointInstalled { replica: self.id, index: k, digest });
        let started: Vec<i64> =
            self.chkpt_timer_started.iter().copied().filter(|&i| i <= k).collect();
        for i in started {
            self.disarm(out, TimerKind::Chkpt(i));
        }
        self.gc_below(k);
    }

    pub(crate) fn on_checkpoint_msg(
        &mut self,
        now: Micros,
        env: &Envelope,
        index: i64,
        digest: HashDigest,
        app_digest: HashDigest,
        out: &mut Outbox,
    ) {
        if self.mode.in_repair() {
            self.counters.stale_dropped += 1;
            return;
        }
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        if index <= self.chkpt.index {
            return;
        }
        self.ckpt_q.entry(index).or_default().insert(sender, (digest, app_digest));
        let best = {
            let records = &self.ckpt_q[&index];
            let mut groups: BTreeMap<&(HashDigest, HashDigest), Vec<u32>> = BTreeMap::new();
            for (s, rec) in records {
                groups.entry(rec).or_default().push(*s);
            }
            groups
                .into_iter()
                .max_by_key(|(key, v)| (v.len(), (*key).clone()))
                .map(|(key, v)| (key.clone(), v))
        };
        let Some(((d, a), senders)) = best else {
            return;
        };
        if senders.len() < self.cfg.weak_quorum() {
            return;
        }
        if self.chkpt_timer_started.contains(&index) {
            self.disarm(out, TimerKind::Chkpt(index));
        }
        let matches_own = self.log.covers(index) && self.log.digest_at(index) == Some(&d);
        if matches_own {
            // our chain is committed through this index even though we
            // never assembled the full proof ourselves
            self.trace_committed_entries(out, index);
            return;
        }
        if self.mode == Mode::Normal && self.cfg.align_enabled {
            self.start_align(now, index, d, a, senders, out);
        }
    }

    pub(crate) fn on_chkpt_timeout(&mut self, now: Micros, k: i64, out: &mut Outbox) {
        if self.mode.in_repair() || k <= self.chkpt.index {
            return;
        }
        if self.timeout_sent.insert(k) {
            let msg = Message::Timeout { round: self.round, index: k };
            let env = Envelope::signed(msg, &self.key);
            self.timeout_q.entry(k).or_default().insert(self.index, env.clone());
            out.broadcast_except(self.cfg.n(), self.index, env);
            self.check_timeout_quorum(now, k, out);
        }
    }

    pub(crate) fn on_timeout_msg(&mut self, now: Micros, env: &Envelope, index: i64, out: &mut Outbox) {
        if self.mode.in_repair() || index <= self.chkpt.index {
            return;
        }
        let Some(sender) = env.sender.replica_index() else {
            return;
        };
        self.timeout_q.entry(index).or_default().insert(sender, env.clone());
        self.check_timeout_quorum(now, index, out);
    }

    fn check_timeout_quorum(&mut self, now: Micros, k: i64, out: &mut Outbox) {
        let Some(records) = self.timeout_q.get(&k) else {
            return;
        };
        if records.len() >= self.cfg.weak_quorum() && self.proof_sent.insert(k) {
            let timeouts: Vec<Envelope> =
                records.values().take(self.cfg.weak_quorum()).cloned().collect();
            let msg = Message::TimeoutProof { round: self.round, index: k, timeouts };
            out.broadcast_except(self.cfg.n(), self.index, Envelope::unsigned(msg, self.id));
            self.enter_repair(now, out);
        }
    }

    /// TIMEOUT-PROOF / CONFLICT-PROOF: verify the embedded signed
    /// constituents, then re-broadcast and enter repair.
    pub(crate) fn on_proof_msg(&mut self, now: Micros, env: &Envelope, out: &mut Outbox) {
        if self.mode.in_repair() {
            return;
        }
        let valid = match &env.msg {
            Message::TimeoutProof { round, index, timeouts } => {
                self.validate_timeout_proof(*round, *index, timeouts)
            }
            Message::ConflictProof { round, index, syncs } => {
                self.validate_conflict_proof(*round, *index, syncs)
            }
            _ => false,
        };
        if !valid {
            self.counters.invalid_proof_dropped += 1;
            return;
        }
        out.broadcast_except(self.cfg.n(), self.index, env.clone());
        self.enter_repair(now, out);
    }

    fn validate_timeout_proof(&self, round: u64, index: i64, timeouts: &[Envelope]) -> bool {
        if timeouts.len() < self.cfg.weak_quorum() {
            return false;
        }
        let mut senders = Vec::new();
        for t in timeouts {
            let Message::Timeout { round: r, index: k } = &t.msg else {
                return false;
            };
            if *r != round || *k != index || !t.verify(&self.ring) {
                return false;
            }
            let Some(s) = t.sender.replica_index() else {
                return false;
            };
            senders.push(s);
        }
        senders.sort_unstable();
        senders.dedup();
        senders.len() >= self.cfg.weak_quorum()
    }

    /// Validate a set of SYNC envelopes as a fast quorum for `index` in the
    /// current round: distinct signers, valid signatures, all consistent.
    /// Returns the agreed (chain digest, app digest, max eta_star).
    pub(crate) fn validate_sync_set(
        &self,
        index: i64,
        proof: &[Envelope],
    ) -> Option<(HashDigest, HashDigest, Micros)> {
        let mut senders = Vec::new();
        let mut agreed: Option<(&HashDigest, &HashDigest)> = None;
        let mut eta_star = 0;
        for env in proof {
            let Message::Sync { round, index: k, digest: d, eta_star: e, app_digest: a } =
                &env.msg
            else {
                return None;
            };
            if *round != self.round || *k != index || !env.verify(&self.ring) {
                return None;
            }
            match agreed {
                None => agreed = Some((d, a)),
                Some(prev) if prev == (d, a) => {}
                Some(_) => return None,
            }
            eta_star = eta_star.max(*e);
            senders.push(env.sender.replica_index()?);
        }
        senders.sort_unstable();
        senders.dedup();
        if senders.len() < self.cfg.fast_quorum() {
            return None;
        }
        agreed.map(|(d, a)| (d.clone(), a.clone(), eta_star))
    }

    fn validate_conflict_proof(&self, round: u64, index: i64, syncs: &[Envelope]) -> bool {
        let mut by_sender: BTreeMap<u32, (HashDigest, HashDigest)> = BTreeMap::new();
        for s in syncs {
            let Message::Sync { round: r, index: k, digest, app_digest, .. } = &s.msg else {
                return false;
            };
            if *r != round || *k != index || !s.verify(&self.ring) {
                return false;
            }
            let Some(sender) = s.sender.replica_index() else {
                return false;
            };
            by_sender.insert(sender, (digest.clone(), app_digest.clone()));
        }
        let m = by_sender.len() as i64;
        let mut groups: BTreeMap<&(HashDigest, HashDigest), i64> = BTreeMap::new();
        for rec in by_sender.values() {
            *groups.entry(rec).or_default() += 1;
        }
        let c = groups.values().copied().max().unwrap_or(0);
        (self.cfg.n() as i64 - m) < (self.cfg.fast_quorum() as i64 - c)
    }
}
