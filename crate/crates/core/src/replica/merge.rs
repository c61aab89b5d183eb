//! Deterministic construction of the repaired log from a set of n-f
//! uncommitted log summaries.
//!
//! Requirements: (1) every replica must compute the same log from the same
//! history, and (2) any request that committed on the fast path must keep
//! its slot. The second holds because a fast quorum of n-p replicas
//! intersects the n-f logs of the history in at least f+p+1 members, so a
//! fast-committed request shows up with a consistent history in a majority
//! of the logs.
//!
//! The merge proceeds in two passes:
//!  1. keep the longest prefix above the committed base where one candidate
//!     entry has identical (index, chain digest, request id) in at least
//!     f+p+1 logs whose chains anchor to the prefix built so far;
//!  2. append every remaining request that appears in at least f+1 logs,
//!     sorted by client id; anything rarer is left for requeueing.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::HashDigest;
use crate::message::{LogEntryId, RequestId};
use crate::types::Micros;

/// One validated LOG message, reduced to what merging needs.
#[derive(Debug, Clone)]
pub struct LogView {
    pub sender: u32,
    pub base_index: i64,
    pub base_digest: HashDigest,
    pub eta_star: Micros,
    /// Entries at base_index+1, base_index+2, ...
    pub entries: Vec<LogEntryId>,
}

impl LogView {
    pub fn last_index(&self) -> i64 {
        self.base_index + self.entries.len() as i64
    }

    pub fn entry_at(&self, index: i64) -> Option<&LogEntryId> {
        if index <= self.base_index {
            return None;
        }
        self.entries.get((index - self.base_index - 1) as usize)
    }

    /// Chain digest at `index` when this log knows it.
    pub fn digest_at(&self, index: i64) -> Option<&HashDigest> {
        if index == self.base_index {
            Some(&self.base_digest)
        } else {
            self.entry_at(index).map(|e| &e.digest)
        }
    }
}

/// The merged log: a committed base, the preserved consistent prefix with
/// digests vouched for by the history, and appended salvaged requests whose
/// digests are recomputed when the log is rebuilt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedLog {
    pub base_index: i64,
    pub base_digest: HashDigest,
    pub preserved: Vec<LogEntryId>,
    pub appended: Vec<RequestId>,
}

impl MergedLog {
    pub fn len_above_base(&self) -> usize {
        self.preserved.len() + self.appended.len()
    }

    /// Request ids in final log order (preserved then appended).
    pub fn ordered_ids(&self) -> impl Iterator<Item = RequestId> + '_ {
        self.preserved.iter().map(|e| e.rid()).chain(self.appended.iter().cloned())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MergeError {
    #[error("history is empty")]
    Empty,
    #[error("two logs claim conflicting committed bases at index {0}")]
    ConflictingBases(i64),
}

/// Merge `views` (the n-f logs of a repair history) into the new log.
/// Pure and deterministic: equal inputs give equal outputs on every
/// replica.
pub fn construct_new_log(f: u32, p: u32, views: &[LogView]) -> Result<MergedLog, MergeError> {
    if views.is_empty() {
        return Err(MergeError::Empty);
    }
    let rule1_support = (f + p + 1) as usize;
    let rule2_support = (f + 1) as usize;

    // The merge base is the highest committed base any log vouches for.
    // Conflicting digests at the same committed index mean a forged LOG
    // slipped past validation; reject the whole history.
    let base_index = views.iter().map(|v| v.base_index).max().unwrap();
    let mut base_digest: Option<&HashDigest> = None;
    for v in views.iter().filter(|v| v.base_index == base_index) {
        match base_digest {
            None => base_digest = Some(&v.base_digest),
            Some(d) if d == &v.base_digest => {}
            Some(_) => return Err(MergeError::ConflictingBases(base_index)),
        }
    }
    let base_digest = base_digest.unwrap().clone();

    // Pass 1: extend the preserved prefix while some candidate entry has
    // rule-one support among chain-anchored logs. Digest equality at k-1 is
    // prefix equality, so anchoring is a single comparison per log.
    let mut preserved: Vec<LogEntryId> = Vec::new();
    let mut prev_digest = base_digest.clone();
    let mut k = base_index + 1;
    loop {
        let mut tally: BTreeMap<(&HashDigest, RequestId), usize> = BTreeMap::new();
        for v in views {
            let anchored = v.digest_at(k - 1) == Some(&prev_digest);
            if !anchored {
                continue;
            }
            if let Some(e) = v.entry_at(k) {
                *tally.entry((&e.digest, e.rid())).or_default() += 1;
            }
        }
        // rule1_support > |views|/2, so at most one candidate can qualify
        let winner = tally.into_iter().find(|(_, n)| *n >= rule1_support);
        match winner {
            Some(((digest, rid), _)) => {
                preserved.push(LogEntryId {
                    digest: digest.clone(),
                    client: rid.client,
                    seq: rid.seq,
                    op_digest: rid.op_digest,
                });
                prev_digest = preserved.last().unwrap().digest.clone();
                k += 1;
            }
            None => break,
        }
    }

    // Pass 2: salvage requests seen in at least f+1 logs, in (client, seq,
    // op digest) order. A log whose chain matches the merge base at the
    // base index proves its entries at or below the base are already
    // committed, so those never re-enter the tally. Requests already
    // preserved are skipped; requests seen fewer times are the callers' to
    // requeue.
    let mut seen: BTreeMap<RequestId, usize> = BTreeMap::new();
    for v in views {
        let cutoff = if v.digest_at(base_index) == Some(&base_digest) {
            base_index
        } else {
            v.base_index
        };
        let mut in_this_log: Vec<RequestId> = v
            .entries
            .iter()
            .enumerate()
            .filter(|(i, _)| v.base_index + 1 + *i as i64 > cutoff)
            .map(|(_, e)| e.rid())
            .collect();
        in_this_log.sort();
        in_this_log.dedup();
        for rid in in_this_log {
            *seen.entry(rid).or_default() += 1;
        }
    }
    let preserved_ids: Vec<RequestId> = preserved.iter().map(|e| e.rid()).collect();
    let appended: Vec<RequestId> = seen
        .into_iter()
        .filter(|(rid, n)| *n >= rule2_support && !preserved_ids.contains(rid))
        .map(|(rid, _)| rid)
        .collect();

    Ok(MergedLog { base_index, base_digest, preserved, appended })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{chain_base, digest, CryptoMode};

    const M: CryptoMode = CryptoMode::Null;

    /// Build a LogView from request names; the chain digest is recomputed
    /// the way replicas would, so equal prefixes hash equally.
    pub(crate) fn view(sender: u32, names: &[&str]) -> LogView {
        let mut entries = Vec::new();
        let mut prev = chain_base(M);
        for name in names {
            let op_digest = digest(M, name.as_bytes());
            // chain over (prev || name), standing in for the request bytes
            let mut buf = prev.as_bytes().to_vec();
            buf.extend_from_slice(name.as_bytes());
            let d = digest(M, &buf);
            entries.push(LogEntryId {
                digest: d.clone(),
                client: crate::types::NodeId::Client(name.bytes().next().unwrap() as u32),
                seq: 0,
                op_digest,
            });
            prev = d;
        }
        LogView { sender, base_index: -1, base_digest: chain_base(M), eta_star: 0, entries }
    }

    fn names(m: &MergedLog) -> (Vec<u32>, Vec<u32>) {
        let p = m.preserved.iter().map(|e| match e.client {
            crate::types::NodeId::Client(c) => c,
            _ => unreachable!(),
        });
        let a = m.appended.iter().map(|e| match e.client {
            crate::types::NodeId::Client(c) => c,
            _ => unreachable!(),
        });
        (p.collect(), a.collect())
    }

    #[test]
    fn five_log_example_preserves_appends_and_excludes() {
        // f=1, p=1 (n=6), five logs: a, b, c form the consistent prefix in
        // three logs; d, e, f appear at least twice and are appended in
        // client order; g appears once and is excluded.
        let views = vec![
            view(0, &["a", "b", "c", "d", "e"]),
            view(1, &["a", "b", "c", "d", "e"]),
            view(2, &["a", "b", "f", "d", "e"]),
            view(3, &["a", "b", "c", "f", "g"]),
            view(4, &["a", "b", "f", "e"]),
        ];
        let merged = construct_new_log(1, 1, &views).unwrap();
        let (preserved, appended) = names(&merged);
        let c = |ch: char| ch as u32;
        assert_eq!(preserved, vec![c('a'), c('b'), c('c')]);
        assert_eq!(appended, vec![c('d'), c('e'), c('f')]);
    }

    #[test]
    fn unanimous_logs_pass_through() {
        let views: Vec<_> = (0..5).map(|s| view(s, &["a", "b", "c"])).collect();
        let merged = construct_new_log(1, 1, &views).unwrap();
        let (preserved, appended) = names(&merged);
        assert_eq!(preserved.len(), 3);
        assert!(appended.is_empty());
        // determinism: same history, same output
        assert_eq!(merged, construct_new_log(1, 1, &views).unwrap());
    }

    #[test]
    fn conflicting_committed_bases_rejected() {
        let mut a = view(0, &["a"]);
        let mut b = view(1, &["a"]);
        a.base_index = 3;
        a.base_digest = digest(M, b"base-1");
        b.base_index = 3;
        b.base_digest = digest(M, b"base-2");
        assert_eq!(
            construct_new_log(1, 1, &[a, b]),
            Err(MergeError::ConflictingBases(3))
        );
    }

    #[test]
    fn diverged_prefix_blocks_rule_one_support() {
        // d sits at the same index in three logs, but one of them has a
        // different prefix, so only two chains anchor: below rule-one
        // support, d falls through to the append pass.
        let views = vec![
            view(0, &["a", "d"]),
            view(1, &["a", "d"]),
            view(2, &["b", "d"]),
            view(3, &["a"]),
            view(4, &["b"]),
        ];
        let merged = construct_new_log(1, 1, &views).unwrap();
        let (preserved, appended) = names(&merged);
        assert_eq!(preserved, vec!['a' as u32]);
        assert_eq!(appended, vec!['b' as u32, 'd' as u32]);
    }

    #[test]
    fn higher_base_wins_and_lower_logs_self_exclude() {
        // One log already checkpointed through index 1; the merge starts
        // above its base and salvages frequent leftovers.
        let full = view(0, &["a", "b", "c"]);
        let base_digest = full.entries[1].digest.clone();
        let ahead = LogView {
            sender: 1,
            base_index: 1,
            base_digest: base_digest.clone(),
            eta_star: 0,
            entries: full.entries[2..].to_vec(),
        };
        let views = vec![
            ahead,
            view(2, &["a", "b", "c"]),
            view(3, &["a", "b", "c"]),
            view(4, &["a", "b"]),
            view(5, &["x", "y"]),
        ];
        let merged = construct_new_log(1, 1, &views).unwrap();
        assert_eq!(merged.base_index, 1);
        assert_eq!(merged.base_digest, base_digest);
        let (preserved, appended) = names(&merged);
        assert_eq!(preserved, vec!['c' as u32]);
        // x and y appear once each: excluded
        assert!(appended.is_empty());
    }
}
