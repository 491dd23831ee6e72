//! Append-only commit history. One record per decided root transaction,
//! sufficient to drive the serial-replay oracle and the order-embedding
//! audit, serialized as line-delimited canonical JSON (bit-exact across
//! equal-seed runs).

use crate::error::EngineError;
use crate::storage::{ReadSetEntry, WriteSummary};
use crate::value::Value;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AbortReason {
    UserError,
    ValidationConflict,
    PendingOverlap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordedOutcome {
    Committed { value: Value },
    Aborted { reason: AbortReason, error: String },
}

/// One participant's view of a decided root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub partition: u32,
    /// Local sequence assigned when the fragment voted Valid; `None` when
    /// this participant voted Conflict.
    pub vote_seq: Option<u64>,
    /// Local commit sequence assigned when the fragment applied; `None` for
    /// aborts.
    pub apply_seq: Option<u64>,
    pub reads: Vec<ReadSetEntry>,
    pub writes: Vec<WriteSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub global_index: u64,
    pub root_id: u64,
    /// Client request tag; retries of one request share it.
    pub tag: u64,
    pub txn: String,
    pub args: Value,
    pub outcome: RecordedOutcome,
    pub participants: Vec<ParticipantRecord>,
    pub submit_us: u64,
    pub decide_us: u64,
}

impl HistoryRecord {
    pub fn committed(&self) -> bool {
        matches!(self.outcome, RecordedOutcome::Committed { .. })
    }

    pub fn touches(&self, partition: u32) -> bool {
        self.participants.iter().any(|p| p.partition == partition)
    }
}

#[derive(Debug, Default, Clone)]
pub struct HistoryLog {
    records: Vec<HistoryRecord>,
    by_root: HashMap<u64, usize>,
}

impl HistoryLog {
    pub fn new() -> HistoryLog {
        HistoryLog::default()
    }

    pub fn append(&mut self, record: HistoryRecord) {
        self.by_root.insert(record.root_id, self.records.len());
        self.records.push(record);
    }

    /// Fills in a participant's apply sequence once its fragment applied.
    pub fn note_applied(&mut self, root_id: u64, partition: u32, apply_seq: u64) {
        if let Some(&idx) = self.by_root.get(&root_id) {
            if let Some(p) = self.records[idx]
                .participants
                .iter_mut()
                .find(|p| p.partition == partition)
            {
                p.apply_seq = Some(apply_seq);
            }
        }
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_writer(&self, mut w: impl Write) -> Result<(), EngineError> {
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec).map_err(|e| EngineError::Io(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_string_lines(&self) -> String {
        let mut buf = Vec::new();
        self.to_writer(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn from_reader(r: impl BufRead) -> Result<HistoryLog, EngineError> {
        let mut log = HistoryLog::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: HistoryRecord = serde_json::from_str(&line)
                .map_err(|e| EngineError::MalformedHistory(e.to_string()))?;
            log.append(rec);
        }
        Ok(log)
    }
}

/// Audits the per-partition order embedding: for every partition, the
/// committed records touching it, taken in global-index order, must carry
/// strictly increasing local apply sequences (i.e. the partition applied
/// them in exactly that order).
pub fn check_order_embedding(records: &[HistoryRecord]) -> Result<(), String> {
    let mut by_index: Vec<&HistoryRecord> = records.iter().filter(|r| r.committed()).collect();
    by_index.sort_by_key(|r| r.global_index);
    for w in by_index.windows(2) {
        if w[0].global_index == w[1].global_index {
            return Err(format!(
                "duplicate global index {} (roots {} and {})",
                w[0].global_index, w[0].root_id, w[1].root_id
            ));
        }
    }
    let mut partitions: Vec<u32> = by_index
        .iter()
        .flat_map(|r| r.participants.iter().map(|p| p.partition))
        .collect();
    partitions.sort_unstable();
    partitions.dedup();

    for partition in partitions {
        let mut last_seq = 0u64;
        let mut last_root = 0u64;
        for rec in &by_index {
            let Some(p) = rec.participants.iter().find(|p| p.partition == partition) else {
                continue;
            };
            let seq = p.apply_seq.ok_or_else(|| {
                format!(
                    "committed root {} never applied on partition {}",
                    rec.root_id, partition
                )
            })?;
            if seq <= last_seq {
                return Err(format!(
                    "partition {partition}: apply order inverts global order \
                     (root {last_root} seq {last_seq} before root {} seq {seq})",
                    rec.root_id
                ));
            }
            last_seq = seq;
            last_root = rec.root_id;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(g: u64, root: u64, partition: u32, apply_seq: u64) -> HistoryRecord {
        HistoryRecord {
            global_index: g,
            root_id: root,
            tag: root,
            txn: "t".into(),
            args: json!({}),
            outcome: RecordedOutcome::Committed { value: Value::Null },
            participants: vec![ParticipantRecord {
                partition,
                vote_seq: Some(apply_seq),
                apply_seq: Some(apply_seq),
                reads: vec![],
                writes: vec![],
            }],
            submit_us: 0,
            decide_us: 0,
        }
    }

    #[test]
    fn embedding_accepts_consistent_and_rejects_inverted() {
        let ok = vec![rec(1, 10, 0, 1), rec(2, 11, 0, 2)];
        assert!(check_order_embedding(&ok).is_ok());
        let bad = vec![rec(1, 10, 0, 2), rec(2, 11, 0, 1)];
        let err = check_order_embedding(&bad).unwrap_err();
        assert!(err.contains("inverts"), "{err}");
    }

    #[test]
    fn serialization_roundtrip_is_stable() {
        let mut log = HistoryLog::new();
        log.append(rec(1, 10, 0, 1));
        log.append(rec(2, 11, 1, 1));
        let text = log.to_string_lines();
        let back = HistoryLog::from_reader(text.as_bytes()).unwrap();
        assert_eq!(back.records(), log.records());
        assert_eq!(back.to_string_lines(), text);
    }
}
