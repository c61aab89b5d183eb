//! Client library: submission through a proxy, quorum tracking over
//! replies, retransmission, and exactly-once result delivery.
//!
//! A request commits on the fast path once n-p SPEC-REPLYs agree on
//! (round, index, log digest, result), or on the slow path once f+1
//! COMMITTED-REPLYs agree on (round, result). Corrected SPEC-REPLYs from a
//! realigned replica replace that replica's earlier vote. Contradictory
//! signed replies from one replica are recorded as Byzantine evidence but
//! never affect the protocol.

use std::collections::BTreeMap;

use crate::config::Config;
use crate::crypto::{HashDigest, KeyPair, Keyring};
use crate::message::{Envelope, Message};
use crate::node::{Action, CommitPath, Delivery, Outbox, TimerKind};
use crate::trace::TraceEvent;
use crate::types::{ClientRequest, Micros, NodeId};

#[derive(Debug)]
struct Pending {
    request: ClientRequest,
    submit_ts: Micros,
    /// replica -> latest (round, index, digest, result)
    spec: BTreeMap<u32, (u64, u64, HashDigest, Vec<u8>)>,
    /// replica -> (round, result)
    committed: BTreeMap<u32, (u64, Vec<u8>)>,
    /// (replica, round, index) -> first (digest, result) seen, for
    /// equivocation detection
    seen: BTreeMap<(u32, u64, u64), (HashDigest, Vec<u8>)>,
    timeouts: u32,
}

pub struct Client {
    id: NodeId,
    key: KeyPair,
    ring: Keyring,
    cfg: Config,
    proxies: Vec<NodeId>,
    active_proxy: usize,
    next_seq: u64,
    pending: BTreeMap<u64, Pending>,
    delivered: BTreeMap<u64, Vec<u8>>,
    pub evidence: u64,
}

impl Client {
    pub fn new(cfg: Config, key: KeyPair, ring: Keyring, proxies: Vec<NodeId>) -> Self {
        assert!(!proxies.is_empty(), "client needs at least one proxy");
        Client {
            id: key.id(),
            key,
            ring,
            cfg,
            proxies,
            active_proxy: 0,
            next_seq: 0,
            pending: BTreeMap::new(),
            delivered: BTreeMap::new(),
            evidence: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    fn retransmit_after(&self) -> Micros {
        // default retransmit timeout: 4x the ETA cap
        4 * self.cfg.delta_us()
    }

    /// Submit an operation; returns the assigned sequence number.
    pub fn submit(&mut self, now: Micros, op: Vec<u8>, out: &mut Outbox) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        let request = ClientRequest::new_signed(&self.key, seq, op);
        self.pending.insert(seq, Pending {
            request: request.clone(),
            submit_ts: now,
            spec: BTreeMap::new(),
            committed: BTreeMap::new(),
            seen: BTreeMap::new(),
            timeouts: 0,
        });
        out.trace(TraceEvent::Submit { client: self.id, seq });
        out.send(self.proxies[self.active_proxy], Envelope::unsigned(Message::Request { request }, self.id));
        out.set_timer(TimerKind::Retransmit(seq), now + self.retransmit_after(), 0);
        seq
    }

    pub fn on_timer(&mut self, now: Micros, kind: TimerKind, _gen: u64, out: &mut Outbox) {
        let TimerKind::Retransmit(seq) = kind else {
            return;
        };
        let Some(p) = self.pending.get_mut(&seq) else {
            return;
        };
        p.timeouts += 1;
        // after two timeouts on one proxy, try the next (it may be
        // withholding our requests)
        if p.timeouts % 2 == 0 && self.proxies.len() > 1 {
            self.active_proxy = (self.active_proxy + 1) % self.proxies.len();
        }
        let request = p.request.clone();
        out.send(self.proxies[self.active_proxy], Envelope::unsigned(Message::Request { request }, self.id));
        out.set_timer(TimerKind::Retransmit(seq), now + self.retransmit_after(), 0);
    }

    pub fn on_message(&mut self, now: Micros, _from: NodeId, env: Envelope, out: &mut Outbox) {
        if !env.verify(&self.ring) {
            return;
        }
        let Some(replica) = env.sender.replica_index() else {
            return;
        };
        match env.msg {
            Message::SpecReply { round, client, seq, index, digest, result } => {
                if client != self.id {
                    return;
                }
                if self.pending.contains_key(&seq) {
                    let p = self.pending.get_mut(&seq).unwrap();
                    // contradictory signed replies for the same slot are
                    // Byzantine evidence
                    let key = (replica, round, index);
                    match p.seen.get(&key) {
                        Some((d, r)) if *d != digest || *r != result => {
                            self.evidence += 1;
                            out.trace(TraceEvent::Evidence {
                                node: self.id,
                                desc: format!(
                                    "replica:{replica} equivocated SPEC-REPLY at round {round} index {index}"
                                ),
                            });
                        }
                        None => {
                            p.seen.insert(key, (digest.clone(), result.clone()));
                        }
                        _ => {}
                    }
                    // corrected replies replace this replica's earlier vote
                    p.spec.insert(replica, (round, index, digest, result));
                    self.try_commit(now, seq, out);
                }
            }
            Message::CommittedReply { round, client, seq, result } => {
                if client != self.id {
                    return;
                }
                if let Some(prev) = self.delivered.get(&seq) {
                    if *prev != result {
                        self.evidence += 1;
                        out.trace(TraceEvent::Evidence {
                            node: self.id,
                            desc: format!("conflicting committed result for seq {seq}"),
                        });
                    }
                    return;
                }
                if self.pending.contains_key(&seq) {
                    let p = self.pending.get_mut(&seq).unwrap();
                    p.committed.insert(replica, (round, result));
                    self.try_commit(now, seq, out);
                }
            }
            _ => {}
        }
    }

    fn try_commit(&mut self, now: Micros, seq: u64, out: &mut Outbox) {
        let Some(p) = self.pending.get(&seq) else {
            return;
        };

        // fast path: n-p consistent speculative replies
        let mut spec_groups: BTreeMap<(u64, u64, &HashDigest, &Vec<u8>), usize> = BTreeMap::new();
        for (round, index, digest, result) in p.spec.values() {
            *spec_groups.entry((*round, *index, digest, result)).or_default() += 1;
        }
        if let Some(((round, index, _, result), _)) =
            spec_groups.iter().find(|(_, n)| **n >= self.cfg.fast_quorum())
        {
            let commit = (*round, Some(*index), (*result).clone(), CommitPath::Fast);
            self.deliver(now, seq, commit, out);
            return;
        }

        // slow path: f+1 committed replies
        let mut committed_groups: BTreeMap<(u64, &Vec<u8>), usize> = BTreeMap::new();
        for (round, result) in p.committed.values() {
            *committed_groups.entry((*round, result)).or_default() += 1;
        }
        if let Some(((round, result), _)) =
            committed_groups.iter().find(|(_, n)| **n >= self.cfg.weak_quorum())
        {
            let commit = (*round, None, (*result).clone(), CommitPath::Repair);
            self.deliver(now, seq, commit, out);
        }
    }

    fn deliver(
        &mut self,
        now: Micros,
        seq: u64,
        commit: (u64, Option<u64>, Vec<u8>, CommitPath),
        out: &mut Outbox,
    ) {
        let (round, index, result, path) = commit;
        let p = self.pending.remove(&seq).expect("pending");
        self.delivered.insert(seq, result.clone());
        out.cancel_timer(TimerKind::Retransmit(seq));
        let latency = now.saturating_sub(p.submit_ts);
        out.trace(TraceEvent::ClientCommit {
            client: self.id,
            seq,
            path,
            round,
            index,
            result: result.clone(),
            latency,
        });
        out.actions.push(Action::Deliver(Delivery { seq, result, path, latency }));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{digest, CryptoMode};

    fn setup(n_proxies: usize) -> (Client, Vec<KeyPair>, Keyring) {
        let cfg = Config::default(); // f=1, p=1, n=6
        let mut ring = Keyring::new(cfg.crypto);
        let ckey = KeyPair::from_seed(cfg.crypto, NodeId::Client(0), 9);
        ring.register(&ckey);
        let rkeys: Vec<KeyPair> = (0..cfg.n() as u32)
            .map(|i| KeyPair::from_seed(cfg.crypto, NodeId::Replica(i), 9))
            .collect();
        for k in &rkeys {
            ring.register(k);
        }
        let proxies = (0..n_proxies as u32).map(NodeId::Proxy).collect();
        (Client::new(cfg, ckey, ring.clone(), proxies), rkeys, ring)
    }

    fn spec_reply(key: &KeyPair, seq: u64, index: u64, res: &[u8]) -> Envelope {
        Envelope::signed(
            Message::SpecReply {
                round: 0,
                client: NodeId::Client(0),
                seq,
                index,
                digest: digest(CryptoMode::Null, b"chain"),
                result: res.to_vec(),
            },
            key,
        )
    }

    #[test]
    fn sequential_seq_assignment_and_fast_commit() {
        let (mut client, rkeys, _) = setup(1);
        let mut out = Outbox::default();
        assert_eq!(client.submit(0, vec![1], &mut out), 0);
        assert_eq!(client.submit(0, vec![1], &mut out), 1);
        // five consistent spec replies (n - p = 5) commit seq 0
        for k in rkeys.iter().take(5) {
            client.on_message(50, k.id(), spec_reply(k, 0, 0, b"r"), &mut out);
        }
        let delivered: Vec<&Delivery> = out
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Deliver(d) => Some(d),
                _ => None,
            })
            .collect();
        assert_eq!(delivered.len(), 1);
        assert_eq!(delivered[0].seq, 0);
        assert_eq!(delivered[0].path, CommitPath::Fast);
        assert_eq!(delivered[0].latency, 50);
        // replays of the same quorum deliver nothing further
        let mut out2 = Outbox::default();
        for k in rkeys.iter().take(5) {
            client.on_message(60, k.id(), spec_reply(k, 0, 0, b"r"), &mut out2);
        }
        assert!(out2.actions.iter().all(|a| !matches!(a, Action::Deliver(_))));
    }

    #[test]
    fn divergent_spec_replies_wait_for_committed_quorum() {
        let (mut client, rkeys, _) = setup(1);
        let mut out = Outbox::default();
        client.submit(0, vec![1], &mut out);
        // four consistent + two divergent: no fast quorum
        for k in rkeys.iter().take(4) {
            client.on_message(10, k.id(), spec_reply(k, 0, 0, b"r"), &mut out);
        }
        for k in rkeys.iter().skip(4) {
            client.on_message(10, k.id(), spec_reply(k, 0, 9, b"x"), &mut out);
        }
        assert!(out.actions.iter().all(|a| !matches!(a, Action::Deliver(_))));
        // two committed replies (f+1) commit via the slow path
        for k in rkeys.iter().take(2) {
            let env = Envelope::signed(
                Message::CommittedReply {
                    round: 0,
                    client: NodeId::Client(0),
                    seq: 0,
                    result: b"r".to_vec(),
                },
                k,
            );
            client.on_message(99, k.id(), env, &mut out);
        }
        let paths: Vec<CommitPath> = out
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Deliver(d) => Some(d.path),
                _ => None,
            })
            .collect();
        assert_eq!(paths, vec![CommitPath::Repair]);
    }

    #[test]
    fn corrected_reply_replaces_and_completes_quorum() {
        let (mut client, rkeys, _) = setup(1);
        let mut out = Outbox::default();
        client.submit(0, vec![1], &mut out);
        for k in rkeys.iter().take(4) {
            client.on_message(10, k.id(), spec_reply(k, 0, 0, b"r"), &mut out);
        }
        // replica 4 first reports a divergent result at another slot...
        client.on_message(10, rkeys[4].id(), spec_reply(&rkeys[4], 0, 3, b"z"), &mut out);
        assert!(out.actions.iter().all(|a| !matches!(a, Action::Deliver(_))));
        // ...then aligns and sends the corrected reply, completing the quorum
        client.on_message(20, rkeys[4].id(), spec_reply(&rkeys[4], 0, 0, b"r"), &mut out);
        let delivered: Vec<&Delivery> = out
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Deliver(d) => Some(d),
                _ => None,
            })
            .collect();
        assert_eq!(delivered.len(), 1);
        assert_eq!(delivered[0].path, CommitPath::Fast);
    }

    #[test]
    fn equivocating_replica_is_recorded_not_crashed() {
        let (mut client, rkeys, _) = setup(1);
        let mut out = Outbox::default();
        client.submit(0, vec![1], &mut out);
        client.on_message(10, rkeys[0].id(), spec_reply(&rkeys[0], 0, 0, b"a"), &mut out);
        client.on_message(11, rkeys[0].id(), spec_reply(&rkeys[0], 0, 0, b"b"), &mut out);
        assert_eq!(client.evidence, 1);
    }

    #[test]
    fn retransmit_rotates_proxy_after_two_timeouts() {
        let (mut client, _, _) = setup(2);
        let mut out = Outbox::default();
        client.submit(0, vec![1], &mut out);
        out.drain();
        client.on_timer(100, TimerKind::Retransmit(0), 0, &mut out);
        let sends: Vec<NodeId> = out
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { to, .. } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(sends, vec![NodeId::Proxy(0)]);
        out.drain();
        client.on_timer(200, TimerKind::Retransmit(0), 0, &mut out);
        let sends: Vec<NodeId> = out
            .actions
            .iter()
            .filter_map(|a| match a {
                Action::Send { to, .. } => Some(*to),
                _ => None,
            })
            .collect();
        assert_eq!(sends, vec![NodeId::Proxy(1)]);
    }
}
