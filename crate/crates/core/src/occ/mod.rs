//! Distributed optimistic concurrency control.
//!
//! Each partition validates backward: a fragment (the read/write set a root
//! accumulated on that partition) is valid iff every read still matches the
//! committed version and it does not overlap any parked fragment. Overlap is
//! symmetric — a validating fragment conflicts with a parked one when either
//! side's writes intersect the other side's reads or writes — so parked
//! fragments always commute and the cluster-wide commit index is a true
//! serial order.
//!
//! The commit protocol is one vote round plus one decision round driven by
//! the root's executor. Participants apply decided fragments in global
//! commit order: a decided fragment is held while some co-parked fragment
//! that validated at or before the decision's counter-sample time is still
//! undecided, because such a fragment may yet surface a smaller index from
//! an in-flight decision. One that validated strictly later provably cannot.

mod history;
mod replay;

pub use history::{
    check_order_embedding, AbortReason, HistoryLog, HistoryRecord, ParticipantRecord,
    RecordedOutcome,
};
pub use replay::{verify_serializability, Counterexample, SerialEngine};

use crate::storage::{PartitionStore, TxnBuffer};
use crate::value::Key;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Why a validation vote rejected a fragment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConflictClass {
    /// A read no longer matches the committed version.
    StaleRead,
    /// The fragment overlaps a validated-but-undecided fragment.
    PendingOverlap,
}

/// A participant's vote on one root's fragment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Valid { vote_seq: u64 },
    Conflict { class: ConflictClass, table: String, key: Key },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationVote {
    pub partition: u32,
    pub verdict: Verdict,
}

/// Backward validation of `frag` against the committed store and the
/// partition's parked fragments.
pub fn validate_fragment(
    frag: &TxnBuffer,
    store: &PartitionStore,
    parked: &[&TxnBuffer],
) -> Result<(), (ConflictClass, String, Key)> {
    for (table, key, version) in frag.read_set() {
        if store.version_of(table, key) != version {
            return Err((ConflictClass::StaleRead, table.to_string(), key.clone()));
        }
    }
    for other in parked {
        if let Some((table, key)) = frag.writes_overlap(other) {
            return Err((ConflictClass::PendingOverlap, table, key));
        }
    }
    Ok(())
}

/// The root's decision for one fragment, as delivered to a participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decision {
    pub commit: bool,
    pub global_index: u64,
    /// Simulated time at which the global counter was sampled.
    pub sample_time_us: u64,
}

#[derive(Debug, Clone)]
struct PendingEntry {
    root: u64,
    vote_seq: u64,
    vote_time_us: u64,
    decision: Option<Decision>,
}

/// Per-partition queue of validated fragments awaiting their decision and
/// their turn to apply.
#[derive(Debug, Default)]
pub struct PendingSet {
    next_vote_seq: u64,
    next_apply_seq: u64,
    entries: Vec<PendingEntry>,
}

impl PendingSet {
    pub fn new() -> PendingSet {
        PendingSet::default()
    }

    /// Parks a fragment that voted Valid; returns its local vote sequence
    /// number (strictly increasing per partition).
    pub fn park(&mut self, root: u64, now_us: u64) -> u64 {
        self.next_vote_seq += 1;
        self.entries.push(PendingEntry {
            root,
            vote_seq: self.next_vote_seq,
            vote_time_us: now_us,
            decision: None,
        });
        self.next_vote_seq
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Roots of parked fragments, for overlap checks.
    pub fn parked_roots(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|e| e.root)
    }

    /// Records a decision. Aborted fragments leave the set immediately
    /// (their writes never apply, so they cannot constrain ordering);
    /// committed ones stay until `pop_applicable` releases them.
    pub fn record_decision(&mut self, root: u64, decision: Decision) {
        if !decision.commit {
            self.entries.retain(|e| e.root != root);
            return;
        }
        if let Some(e) = self.entries.iter_mut().find(|e| e.root == root) {
            e.decision = Some(decision);
        }
    }

    pub fn is_parked(&self, root: u64) -> bool {
        self.entries.iter().any(|e| e.root == root)
    }

    /// Next fragment that is safe to apply, with its local apply sequence
    /// number. Safe means: it has the smallest global index among decided
    /// fragments here, and every undecided fragment validated strictly after
    /// the decision's sample time (so any index it later draws is larger).
    pub fn pop_applicable(&mut self) -> Option<(u64, Decision, u64)> {
        let min_undecided_vote = self
            .entries
            .iter()
            .filter(|e| e.decision.is_none())
            .map(|e| e.vote_time_us)
            .min()
            .unwrap_or(u64::MAX);
        let candidate = self
            .entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.decision.map(|d| (i, d)))
            .min_by_key(|(_, d)| d.global_index)?;
        let (idx, decision) = candidate;
        if decision.sample_time_us >= min_undecided_vote {
            return None;
        }
        let entry = self.entries.remove(idx);
        self.next_apply_seq += 1;
        Some((entry.root, decision, self.next_apply_seq))
    }

    pub fn vote_seq_of(&self, root: u64) -> Option<u64> {
        self.entries.iter().find(|e| e.root == root).map(|e| e.vote_seq)
    }
}

/// Collects parked fragments for an overlap check, excluding the validating
/// root itself.
pub fn parked_fragments<'a>(
    pending: &PendingSet,
    fragments: &'a HashMap<u64, TxnBuffer>,
    exclude_root: u64,
) -> Vec<&'a TxnBuffer> {
    pending
        .parked_roots()
        .filter(|r| *r != exclude_root)
        .filter_map(|r| fragments.get(&r))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::{Catalog, TableSchema};
    use crate::value::Scalar;
    use std::collections::BTreeMap;

    fn setup() -> (Catalog, PartitionStore) {
        let mut c = Catalog::new();
        c.define_table(TableSchema::new("stock", 2, &["qty"], false)).unwrap();
        let mut s = PartitionStore::new(0, &c);
        let mut vals = BTreeMap::new();
        vals.insert("qty".to_string(), Scalar::Int(50));
        s.apply_insert("stock", vec![1, 1], vals);
        (c, s)
    }

    #[test]
    fn stale_read_conflicts_fresh_read_validates() {
        let (c, mut s) = setup();
        let mut frag = TxnBuffer::new();
        frag.get(&c, &s, "stock", &[1, 1]).unwrap();
        // Still at version 1: valid.
        assert!(validate_fragment(&frag, &s, &[]).is_ok());
        // Another commit bumps the version: stale.
        let mut up = BTreeMap::new();
        up.insert("qty".to_string(), Scalar::Int(45));
        s.apply_update("stock", &[1, 1], &up);
        let (class, table, key) = validate_fragment(&frag, &s, &[]).unwrap_err();
        assert_eq!(class, ConflictClass::StaleRead);
        assert_eq!((table.as_str(), key), ("stock", vec![1, 1]));
    }

    #[test]
    fn empty_fragment_validates() {
        let (_, s) = setup();
        let frag = TxnBuffer::new();
        assert!(validate_fragment(&frag, &s, &[]).is_ok());
    }

    #[test]
    fn pending_overlap_conflicts() {
        let (c, s) = setup();
        let mut parked = TxnBuffer::new();
        let mut up = BTreeMap::new();
        up.insert("qty".to_string(), Scalar::Int(45));
        parked.update(&c, &s, false, "stock", &[1, 1], up).unwrap();

        let mut reader = TxnBuffer::new();
        reader.get(&c, &s, "stock", &[1, 1]).unwrap();
        let (class, _, _) = validate_fragment(&reader, &s, &[&parked]).unwrap_err();
        assert_eq!(class, ConflictClass::PendingOverlap);
    }

    #[test]
    fn applies_follow_global_index_order() {
        let mut p = PendingSet::new();
        assert_eq!(p.park(10, 100), 1);
        assert_eq!(p.park(11, 200), 2);
        // Root 11 decides first (g=5, sampled t=250) but root 10 validated at
        // t=100 <= 250 and is still undecided: hold.
        p.record_decision(11, Decision { commit: true, global_index: 5, sample_time_us: 250 });
        assert!(p.pop_applicable().is_none());
        // Root 10's decision arrives with a larger index sampled later; both
        // release in index order.
        p.record_decision(10, Decision { commit: true, global_index: 6, sample_time_us: 300 });
        let (root, d, apply_seq) = p.pop_applicable().unwrap();
        assert_eq!((root, d.global_index, apply_seq), (11, 5, 1));
        let (root, d, apply_seq) = p.pop_applicable().unwrap();
        assert_eq!((root, d.global_index, apply_seq), (10, 6, 2));
        assert!(p.is_empty());
    }

    #[test]
    fn later_validation_does_not_hold_earlier_decision() {
        let mut p = PendingSet::new();
        p.park(10, 100);
        p.record_decision(10, Decision { commit: true, global_index: 3, sample_time_us: 150 });
        // A fragment validated strictly after the sample time cannot draw a
        // smaller index, so it does not hold the apply.
        p.park(11, 200);
        let (root, _, _) = p.pop_applicable().unwrap();
        assert_eq!(root, 10);
    }

    #[test]
    fn abort_unblocks_holds() {
        let mut p = PendingSet::new();
        p.park(10, 100);
        p.park(11, 200);
        p.record_decision(11, Decision { commit: true, global_index: 5, sample_time_us: 250 });
        assert!(p.pop_applicable().is_none());
        p.record_decision(10, Decision { commit: false, global_index: 4, sample_time_us: 260 });
        let (root, _, _) = p.pop_applicable().unwrap();
        assert_eq!(root, 11);
    }
}
