//! Alignment: a diverged replica adopts a quorum checkpoint and replays
//! its surviving requests.
//!
//! Triggered by f+1 consistent CHECKPOINT messages that conflict with the
//! local chain. The replica requests the snapshot from the checkpoint
//! senders, restores it, discards every pending request with an ETA at or
//! below the checkpoint's watermark, and re-executes the rest in ETA
//! order, emitting corrected SPEC-REPLYs. Old replies above the checkpoint
//! are implicitly invalidated by their stale chain digests.
//!
//! Alignment runs in the background: the replica keeps answering SYNC,
//! CHECKPOINT and repair traffic; only speculative execution pauses, with
//! arriving requests buffered in the release queue for replay.

use crate::crypto::HashDigest;
use crate::log::CheckpointState;
use crate::message::{Envelope, Message};
use crate::node::{Outbox, TimerKind};
use crate::trace::TraceEvent;
use crate::types::Micros;

use super::{AlignState, Mode, Replica};

impl Replica {
    pub(crate) fn start_align(
        &mut self,
        now: Micros,
        target: i64,
        digest: HashDigest,
        app_digest: HashDigest,
        sources: Vec<u32>,
        out: &mut Outbox,
    ) {
        if self.mode != Mode::Normal || target <= self.chkpt.index {
            return;
        }
        self.mode = Mode::Aligning;
        self.counters.aligns += 1;
        self.trace_mode(out);
        for &s in &sources {
            out.send(
                crate::types::NodeId::Replica(s),
                Envelope::unsigned(Message::StateRequest { index: target }, self.id),
            );
        }
        self.align = Some(AlignState { target, digest, app_digest, sources, next_source: 0 });
        self.arm(out, TimerKind::AlignRetry, now + self.cfg.chkpt_timeout_us());
    }

    pub(crate) fn on_align_retry(&mut self, now: Micros, out: &mut Outbox) {
        if self.mode != Mode::Aligning {
            return;
        }
        let Some(al) = self.align.as_mut() else {
            return;
        };
        // round-robin to the next checkpoint holder
        al.next_source = (al.next_source + 1) % al.sources.len().max(1);
        let target = al.target;
        let source = al.sources.get(al.next_source).copied();
        if let Some(s) = source {
            out.send(
                crate::types::NodeId::Replica(s),
                Envelope::unsigned(Message::StateRequest { index: target }, self.id),
            );
        }
        self.arm(out, TimerKind::AlignRetry, now + self.cfg.chkpt_timeout_us());
    }

    /// Serve a checkpoint snapshot when we have one at or past the asked
    /// index.
    pub(crate) fn on_state_request(&mut self, from: crate::types::NodeId, index: i64, out: &mut Outbox) {
        if self.chkpt.index >= index && self.chkpt.index >= 0 {
            let msg = Message::StateReply {
                index: self.chkpt.index,
                snapshot: self.chkpt.snapshot.clone(),
                proof: self.chkpt.proof.clone(),
            };
            out.send(from, Envelope::signed(msg, &self.key));
        }
    }

    pub(crate) fn on_state_reply(
        &mut self,
        now: Micros,
        index: i64,
        snapshot: Vec<u8>,
        proof: Vec<Envelope>,
        out: &mut Outbox,
    ) {
        // Two consumers: alignment, and repair waiting on a base snapshot.
        if self.mode.in_repair() {
            self.on_repair_state_reply(now, index, snapshot, proof, out);
            return;
        }
        if self.mode != Mode::Aligning {
            return;
        }
        let Some(al) = self.align.as_ref() else {
            return;
        };
        if index < al.target {
            return;
        }
        let Some((digest, eta_star)) = self.validate_checkpoint_proof(index, &snapshot, &proof)
        else {
            self.counters.invalid_proof_dropped += 1;
            return;
        };
        self.complete_align(now, index, digest, eta_star, snapshot, proof, out);
    }

    /// Check that `proof` is a fast quorum of valid SYNCs whose app digest
    /// matches `snapshot`, returning the chain digest and the checkpoint's
    /// ETA watermark.
    pub(crate) fn validate_checkpoint_proof(
        &self,
        index: i64,
        snapshot: &[u8],
        proof: &[Envelope],
    ) -> Option<(HashDigest, Micros)> {
        let (digest, app_digest, eta_star) = self.validate_sync_set(index, proof)?;
        if app_digest != self.app_digest_of(snapshot) {
            return None;
        }
        Some((digest, eta_star))
    }

    fn complete_align(
        &mut self,
        now: Micros,
        index: i64,
        digest: HashDigest,
        eta_star: Micros,
        snapshot: Vec<u8>,
        proof: Vec<Envelope>,
        out: &mut Outbox,
    ) {
        // Survivors: our own speculative suffix plus everything buffered
        // while aligning. Collected before the state reset.
        let own_matches = self.log.covers(index) && self.log.digest_at(index) == Some(&digest);
        let mut pool: Vec<crate::types::StampedRequest> = Vec::new();

        if own_matches {
            // we agreed through the checkpoint; only roll back the suffix
            let Some(state) = self.state_at(index) else {
                return;
            };
            if self.exec.restore(&state).is_err() {
                return;
            }
            pool.extend(self.log.truncate_to(index).into_iter().map(|e| e.stamped()));
            self.trace_committed_entries(out, index);
        } else {
            if self.exec.restore(&snapshot).is_err() {
                self.counters.invalid_proof_dropped += 1;
                return;
            }
            pool.extend(self.log.rebase(index, digest.clone(), eta_star).into_iter().map(|e| e.stamped()));
            self.traced_committed = self.traced_committed.max(index);
            out.trace(TraceEvent::CommitWatermark {
                replica: self.id,
                index,
                digest: digest.clone(),
            });
        }
        pool.extend(self.release.drain_all());

        self.chkpt = CheckpointState { index, proof, snapshot, eta_star };
        out.trace(TraceEvent::CheckpointInstalled { replica: self.id, index, digest });
        let started: Vec<i64> =
            self.chkpt_timer_started.iter().copied().filter(|&i| i <= index).collect();
        for i in started {
            self.disarm(out, TimerKind::Chkpt(i));
        }
        self.gc_below(index);

        // Replay survivors in ETA order; the watermark guard drops anything
        // the checkpoint already covers.
        for sr in pool {
            if sr.eta > eta_star {
                self.release.enqueue(sr, now, self.cfg.eta_overwrite_threshold_us());
            } else {
                self.counters.eta_guard_dropped += 1;
            }
        }
        self.align = None;
        self.disarm(out, TimerKind::AlignRetry);
        self.mode = Mode::Normal;
        self.trace_mode(out);
        self.pump_release(now, out);
    }
}
