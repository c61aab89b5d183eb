//! The best-effort sequencing layer.
//!
//! Proxies measure one-way delays to every replica with periodic probes,
//! keep a sliding window per replica, and stamp each client request with an
//! estimated time of arrival:
//!
//! ```text
//! eta = t_send + (1 + gamma) * min(max_r D_q^r, delta)
//! ```
//!
//! where `D_q^r` is the nearest-rank q-th percentile of replica r's window
//! and `delta` caps runaway estimates. Replicas hold arriving requests in a
//! release queue until their local clock passes the ETA; requests released
//! together come out in (eta, proxy, client, seq) order, which is the total
//! order the fast path relies on. Requests arriving past their ETA release
//! immediately — possibly out of order, which is exactly how replicas
//! diverge.

use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::cmp::Reverse;

use crate::config::Config;
use crate::crypto::{KeyPair, Keyring};
use crate::message::{Envelope, Message};
use crate::node::{Outbox, TimerKind};
use crate::trace::TraceEvent;
use crate::types::{Micros, NodeId, StampedRequest};

/// Per-replica sliding windows of one-way-delay samples (microseconds).
#[derive(Debug, Clone)]
pub struct DelayEstimator {
    windows: BTreeMap<u32, VecDeque<Micros>>,
    window_size: usize,
    /// Negative raw samples clamped to zero (clock skew artifacts).
    pub clamped: u64,
}

impl DelayEstimator {
    pub fn new(window_size: usize) -> Self {
        DelayEstimator { windows: BTreeMap::new(), window_size, clamped: 0 }
    }

    /// Record `max(0, recv - send)`; evicts the oldest sample beyond the
    /// window. Returns true when the raw sample was negative.
    pub fn record(&mut self, replica: u32, send_ts: Micros, recv_ts: Micros) -> bool {
        let clamped = recv_ts < send_ts;
        let sample = recv_ts.saturating_sub(send_ts);
        if clamped {
            self.clamped += 1;
        }
        let win = self.windows.entry(replica).or_default();
        if win.len() == self.window_size {
            win.pop_front();
        }
        win.push_back(sample);
        clamped
    }

    /// Nearest-rank q-th percentile: the ceil(q/100 * w)-th order statistic.
    /// Empty window yields None.
    pub fn percentile(&self, replica: u32, q: u32) -> Option<Micros> {
        let win = self.windows.get(&replica)?;
        if win.is_empty() {
            return None;
        }
        let mut sorted: Vec<Micros> = win.iter().copied().collect();
        sorted.sort_unstable();
        let rank = (q as usize * sorted.len()).div_ceil(100).max(1);
        Some(sorted[rank - 1])
    }

    /// Max of the per-replica percentile estimates over replicas 0..n;
    /// replicas without samples contribute `default`.
    pub fn max_delay(&self, n: usize, q: u32, default: Micros) -> Micros {
        (0..n as u32)
            .map(|r| self.percentile(r, q).unwrap_or(default))
            .max()
            .unwrap_or(default)
    }

    pub fn window(&self, replica: u32) -> Option<&VecDeque<Micros>> {
        self.windows.get(&replica)
    }
}

/// eta = t_send + (1 + gamma) * min(max_delay, delta).
pub fn compute_eta(t_send: Micros, max_delay: Micros, gamma: f64, delta: Micros) -> Micros {
    let bounded = max_delay.min(delta);
    let padded = ((1.0 + gamma) * bounded as f64).round() as Micros;
    t_send + padded
}

// ---------------------------------------------------------------------------
// Release queue

#[derive(Debug, PartialEq, Eq)]
struct Held {
    key: (Micros, NodeId, NodeId, u64),
    stamped: StampedRequest,
}

impl Ord for Held {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

impl PartialOrd for Held {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Replica-side priority queue ordered by (eta, proxy, client, seq).
#[derive(Debug, Default)]
pub struct ReleaseQueue {
    heap: BinaryHeap<Reverse<Held>>,
}

impl ReleaseQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Admit a request. ETAs more than `overwrite_threshold` in the future
    /// are overwritten with the local clock, so a bad clock or Byzantine
    /// proxy can delay nothing. Returns the effective ETA.
    pub fn enqueue(&mut self, mut stamped: StampedRequest, now: Micros, overwrite_threshold: Micros) -> Micros {
        if stamped.eta > now + overwrite_threshold {
            stamped.eta = now;
        }
        let eta = stamped.eta;
        self.heap.push(Reverse(Held { key: stamped.release_key(), stamped }));
        eta
    }

    /// Release every request whose ETA has passed, in key order.
    pub fn drain_ready(&mut self, now: Micros) -> Vec<StampedRequest> {
        let mut out = Vec::new();
        while let Some(Reverse(head)) = self.heap.peek() {
            if head.key.0 > now {
                break;
            }
            out.push(self.heap.pop().unwrap().0.stamped);
        }
        out
    }

    /// ETA of the next held request, if any.
    pub fn next_eta(&self) -> Option<Micros> {
        self.heap.peek().map(|Reverse(h)| h.key.0)
    }

    /// Remove and return everything, in key order.
    pub fn drain_all(&mut self) -> Vec<StampedRequest> {
        let mut out = Vec::with_capacity(self.heap.len());
        while let Some(Reverse(h)) = self.heap.pop() {
            out.push(h.stamped);
        }
        out
    }

    /// Peek at all held requests (arbitrary order).
    pub fn iter(&self) -> impl Iterator<Item = &StampedRequest> {
        self.heap.iter().map(|Reverse(h)| &h.stamped)
    }

    /// Drop held requests with ETA at or below `cutoff`, returning how many
    /// were removed.
    pub fn drop_eta_at_or_below(&mut self, cutoff: Micros) -> usize {
        let before = self.heap.len();
        let kept: Vec<Held> =
            std::mem::take(&mut self.heap).into_iter().map(|Reverse(h)| h).filter(|h| h.key.0 > cutoff).collect();
        self.heap = kept.into_iter().map(Reverse).collect();
        before - self.heap.len()
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Proxy engine

/// How many (client, seq) pairs the proxy remembers for idempotent
/// retransmits.
const DEDUP_HORIZON: usize = 4096;

/// A sequencing-layer proxy: verifies client requests, stamps ETAs, and
/// multicasts to all replicas.
pub struct Proxy {
    id: NodeId,
    cfg: Config,
    key: KeyPair,
    ring: Keyring,
    estimator: DelayEstimator,
    dedup: BTreeMap<(NodeId, u64), Micros>,
    dedup_order: VecDeque<(NodeId, u64)>,
    timer_gen: u64,
    pub rejected: u64,
}

impl Proxy {
    pub fn new(cfg: Config, key: KeyPair, ring: Keyring) -> Self {
        let window = cfg.window_size;
        Proxy {
            id: key.id(),
            cfg,
            key,
            ring,
            estimator: DelayEstimator::new(window),
            dedup: BTreeMap::new(),
            dedup_order: VecDeque::new(),
            timer_gen: 0,
            rejected: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn estimator(&self) -> &DelayEstimator {
        &self.estimator
    }

    pub fn on_start(&mut self, now: Micros, out: &mut Outbox) {
        self.send_probes(now, out);
    }

    fn send_probes(&mut self, now: Micros, out: &mut Outbox) {
        let env = Envelope::unsigned(Message::Probe { send_ts: now }, self.id);
        out.broadcast(self.cfg.n(), env);
        self.timer_gen += 1;
        out.set_timer(TimerKind::Probe, now + self.cfg.probe_interval_us(), self.timer_gen);
    }

    pub fn on_timer(&mut self, now: Micros, kind: TimerKind, gen: u64, out: &mut Outbox) {
        if kind == TimerKind::Probe && gen == self.timer_gen {
            self.send_probes(now, out);
        }
    }

    pub fn on_message(&mut self, now: Micros, from: NodeId, env: Envelope, out: &mut Outbox) {
        match env.msg {
            Message::ProbeReply { send_ts, recv_ts } => {
                if let NodeId::Replica(r) = from {
                    if self.estimator.record(r, send_ts, recv_ts) {
                        out.trace(TraceEvent::SkewClamp { proxy: self.id });
                    }
                }
            }
            Message::Request { request } => {
                if !request.verify(&self.ring) {
                    self.rejected += 1;
                    out.trace(TraceEvent::Evidence {
                        node: self.id,
                        desc: format!("bad client signature from {}", from),
                    });
                    return;
                }
                let id = (request.client, request.seq);
                let eta = match self.dedup.get(&id) {
                    // Retransmit: reuse the original ETA so replicas see an
                    // identical stamped request.
                    Some(&eta) => eta,
                    None => {
                        let max_d = self.estimator.max_delay(
                            self.cfg.n(),
                            self.cfg.q,
                            self.cfg.delta_us(),
                        );
                        let eta = compute_eta(now, max_d, self.cfg.gamma, self.cfg.delta_us());
                        self.dedup.insert(id, eta);
                        self.dedup_order.push_back(id);
                        if self.dedup_order.len() > DEDUP_HORIZON {
                            if let Some(old) = self.dedup_order.pop_front() {
                                self.dedup.remove(&old);
                            }
                        }
                        eta
                    }
                };
                let stamped = StampedRequest { request, eta, proxy: self.id };
                let env = Envelope::signed(Message::Stamped { stamped }, &self.key);
                out.broadcast(self.cfg.n(), env);
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::CryptoMode;
    use crate::types::{ClientRequest, MS};

    #[test]
    fn record_appends_and_clamps() {
        let mut est = DelayEstimator::new(4);
        assert!(!est.record(0, 100, 140));
        assert_eq!(est.window(0).unwrap().back(), Some(&40));
        // negative sample clamps to zero and counts
        assert!(est.record(0, 100, 95));
        assert_eq!(est.window(0).unwrap().back(), Some(&0));
        assert_eq!(est.clamped, 1);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut est = DelayEstimator::new(4);
        for d in [10, 20, 30, 40] {
            est.record(0, 0, d);
        }
        est.record(0, 0, 50);
        let got: Vec<_> = est.window(0).unwrap().iter().copied().collect();
        assert_eq!(got, vec![20, 30, 40, 50]);
    }

    #[test]
    fn nearest_rank_percentile() {
        let mut est = DelayEstimator::new(8);
        for d in [10, 20, 30, 40, 50] {
            est.record(0, 0, d);
        }
        // ceil(0.9 * 5) = 5th order statistic
        assert_eq!(est.percentile(0, 90), Some(50));
        // ceil(0.5 * 5) = 3rd order statistic
        assert_eq!(est.percentile(0, 50), Some(30));
        let mut single = DelayEstimator::new(8);
        single.record(1, 0, 7);
        assert_eq!(single.percentile(1, 1), Some(7));
        assert_eq!(single.percentile(1, 100), Some(7));
        assert_eq!(single.percentile(9, 50), None);
    }

    #[test]
    fn eta_formula() {
        // t=1000, delays {30,42,48}, gamma=0.25, delta=500 -> 1000+1.25*48
        let mut est = DelayEstimator::new(8);
        for (r, d) in [(0u32, 30u64), (1, 42), (2, 48)] {
            est.record(r, 0, d);
        }
        let max_d = est.max_delay(3, 90, 500);
        assert_eq!(max_d, 48);
        assert_eq!(compute_eta(1000, max_d, 0.25, 500), 1060);
        // gamma = 0: plain max
        assert_eq!(compute_eta(1000, max_d, 0.0, 500), 1048);
        // cap binds
        assert_eq!(compute_eta(1000, 900, 0.0, 500), 1500);
    }

    #[test]
    fn eta_monotone_in_gamma_and_samples() {
        assert!(compute_eta(0, 40, 0.5, 1000) >= compute_eta(0, 40, 0.25, 1000));
        assert!(compute_eta(0, 50, 0.25, 1000) >= compute_eta(0, 40, 0.25, 1000));
    }

    #[test]
    fn empty_window_defaults_to_cap() {
        let est = DelayEstimator::new(4);
        assert_eq!(est.max_delay(3, 90, 777), 777);
    }

    fn stamped(eta: Micros, seq: u64) -> StampedRequest {
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Client(0), 1);
        StampedRequest {
            request: ClientRequest::new_signed(&key, seq, vec![]),
            eta,
            proxy: NodeId::Proxy(0),
        }
    }

    #[test]
    fn release_holds_until_eta() {
        let mut q = ReleaseQueue::new();
        q.enqueue(stamped(150, 0), 140, 10 * MS);
        assert!(q.drain_ready(140).is_empty());
        assert_eq!(q.next_eta(), Some(150));
        let out = q.drain_ready(150);
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn late_arrival_releases_in_next_drain() {
        let mut q = ReleaseQueue::new();
        q.enqueue(stamped(150, 0), 160, 10 * MS);
        assert_eq!(q.drain_ready(160).len(), 1);
    }

    #[test]
    fn runaway_eta_overwritten_to_now() {
        let mut q = ReleaseQueue::new();
        let threshold = 10 * MS;
        let eff = q.enqueue(stamped(1_000_000, 100), 100, threshold);
        assert_eq!(eff, 100);
        assert_eq!(q.drain_ready(100).len(), 1);
    }

    #[test]
    fn overwrite_never_delays() {
        // effective release time <= max(arrival, eta)
        let mut q = ReleaseQueue::new();
        let eff = q.enqueue(stamped(500, 0), 100, 10 * MS);
        assert!(eff <= 500);
        let mut q2 = ReleaseQueue::new();
        let eff2 = q2.enqueue(stamped(999_999, 0), 100, 10);
        assert!(eff2 <= 100.max(999_999));
        assert_eq!(eff2, 100);
    }

    #[test]
    fn ties_release_in_proxy_client_seq_order() {
        let key = KeyPair::from_seed(CryptoMode::Null, NodeId::Client(1), 1);
        let mk = |proxy, seq| StampedRequest {
            request: ClientRequest::new_signed(&key, seq, vec![]),
            eta: 100,
            proxy: NodeId::Proxy(proxy),
        };
        let mut q = ReleaseQueue::new();
        q.enqueue(mk(1, 0), 50, 10 * MS);
        q.enqueue(mk(0, 1), 50, 10 * MS);
        q.enqueue(mk(0, 0), 50, 10 * MS);
        let order: Vec<_> =
            q.drain_ready(100).iter().map(|s| (s.proxy, s.request.seq)).collect();
        assert_eq!(order, vec![
            (NodeId::Proxy(0), 0),
            (NodeId::Proxy(0), 1),
            (NodeId::Proxy(1), 0)
        ]);
    }
}
