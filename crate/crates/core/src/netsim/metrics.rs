//! Metric probes and the run report. Everything here is derived from
//! simulated time and deterministic counters, so equal seeds produce
//! byte-identical reports.

use crate::occ::AbortReason;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Final aborts (post-retry) by reason class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbortCounts {
    pub user_error: u64,
    pub validation_conflict: u64,
    pub pending_overlap: u64,
}

impl AbortCounts {
    pub fn total(&self) -> u64 {
        self.user_error + self.validation_conflict + self.pending_overlap
    }

    fn bump(&mut self, reason: AbortReason) {
        match reason {
            AbortReason::UserError => self.user_error += 1,
            AbortReason::ValidationConflict => self.validation_conflict += 1,
            AbortReason::PendingOverlap => self.pending_overlap += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Distinct client requests submitted (retries share a tag).
    pub submitted: u64,
    /// Root attempts (submissions including retries).
    pub attempts: u64,
    /// Requests whose final outcome was commit.
    pub committed: u64,
    /// Requests that never committed, by final abort reason.
    pub aborted: AbortCounts,
    /// Every attempt abort, including attempts that were later retried.
    pub attempt_aborts: AbortCounts,
    /// Simulated makespan in microseconds.
    pub simulated_us: u64,
    /// Committed requests per simulated second.
    pub throughput_tps: f64,
    pub latency_p50_us: u64,
    pub latency_p95_us: u64,
    pub latency_p99_us: u64,
    /// Inter-partition envelopes sent (co-located deliveries included).
    pub messages_total: u64,
    pub messages_per_committed: f64,
    /// Remote subtransaction invokes shipped.
    pub remote_invokes_total: u64,
    pub remote_subtxns_per_committed: f64,
    /// Per-physical-worker busy time and fraction of the makespan.
    pub worker_busy_us: Vec<u64>,
    pub worker_busy_fraction: Vec<f64>,
}

#[derive(Debug, Clone)]
struct TagState {
    first_submit_us: u64,
    committed: bool,
    commit_latency_us: u64,
    final_reason: Option<AbortReason>,
}

/// Accumulates raw counters during a run; `report` snapshots them.
#[derive(Debug, Default)]
pub(crate) struct MetricsCollector {
    tags: HashMap<u64, TagState>,
    attempts: u64,
    attempt_aborts: AbortCounts,
    messages_total: u64,
    remote_invokes_total: u64,
    /// messages[src][dst] between logical partitions.
    pub(crate) traffic: Vec<Vec<u64>>,
    /// committed roots homed on each logical partition.
    pub(crate) committed_by_home: Vec<u64>,
}

impl MetricsCollector {
    pub(crate) fn new(num_logical: u32) -> MetricsCollector {
        MetricsCollector {
            traffic: vec![vec![0; num_logical as usize]; num_logical as usize],
            committed_by_home: vec![0; num_logical as usize],
            ..MetricsCollector::default()
        }
    }

    pub(crate) fn reset(&mut self) {
        let n = self.committed_by_home.len();
        *self = MetricsCollector::new(n as u32);
    }

    pub(crate) fn on_submit(&mut self, tag: u64, now_us: u64) {
        self.attempts += 1;
        self.tags.entry(tag).or_insert(TagState {
            first_submit_us: now_us,
            committed: false,
            commit_latency_us: 0,
            final_reason: None,
        });
    }

    pub(crate) fn on_commit(&mut self, tag: u64, home: u32, decide_us: u64) {
        self.committed_by_home[home as usize] += 1;
        if let Some(t) = self.tags.get_mut(&tag) {
            t.committed = true;
            t.commit_latency_us = decide_us.saturating_sub(t.first_submit_us);
            t.final_reason = None;
        }
    }

    pub(crate) fn on_abort(&mut self, tag: u64, reason: AbortReason) {
        self.attempt_aborts.bump(reason);
        if let Some(t) = self.tags.get_mut(&tag) {
            if !t.committed {
                t.final_reason = Some(reason);
            }
        }
    }

    pub(crate) fn on_message(&mut self, src: u32, dst: u32, remote_invoke: bool) {
        self.messages_total += 1;
        self.traffic[src as usize][dst as usize] += 1;
        if remote_invoke {
            self.remote_invokes_total += 1;
        }
    }

    pub(crate) fn report(&self, simulated_us: u64, worker_busy_us: &[u64]) -> MetricsReport {
        let mut committed = 0u64;
        let mut aborted = AbortCounts::default();
        let mut latencies: Vec<u64> = Vec::new();
        for t in self.tags.values() {
            if t.committed {
                committed += 1;
                latencies.push(t.commit_latency_us);
            } else if let Some(r) = t.final_reason {
                aborted.bump(r);
            }
        }
        latencies.sort_unstable();
        let pct = |p: f64| -> u64 {
            if latencies.is_empty() {
                return 0;
            }
            let rank = ((p * latencies.len() as f64).ceil() as usize).clamp(1, latencies.len());
            latencies[rank - 1]
        };
        let secs = simulated_us as f64 / 1e6;
        let per_committed = |n: u64| if committed == 0 { 0.0 } else { n as f64 / committed as f64 };
        MetricsReport {
            submitted: self.tags.len() as u64,
            attempts: self.attempts,
            committed,
            aborted,
            attempt_aborts: self.attempt_aborts.clone(),
            simulated_us,
            throughput_tps: if simulated_us == 0 { 0.0 } else { committed as f64 / secs },
            latency_p50_us: pct(0.50),
            latency_p95_us: pct(0.95),
            latency_p99_us: pct(0.99),
            messages_total: self.messages_total,
            messages_per_committed: per_committed(self.messages_total),
            remote_invokes_total: self.remote_invokes_total,
            remote_subtxns_per_committed: per_committed(self.remote_invokes_total),
            worker_busy_us: worker_busy_us.to_vec(),
            worker_busy_fraction: worker_busy_us
                .iter()
                .map(|&b| if simulated_us == 0 { 0.0 } else { b as f64 / simulated_us as f64 })
                .collect(),
        }
    }
}
