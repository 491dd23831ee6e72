//! Per-root, per-partition transaction buffer: the read set (with cached
//! values, so re-reads inside one root are repeatable even if the executor
//! interleaves other commits while the root is suspended) and the buffered
//! write set that is applied to the store only when the root commits.

use crate::error::TxnError;
use crate::storage::{Catalog, PartitionStore};
use crate::value::{Key, Scalar};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

type TableKey = (String, Key);
type Values = BTreeMap<String, Scalar>;

/// First-read cache: the committed values and version observed the first
/// time this root touched the key on this partition. `None` values record an
/// absence read (version 0), which validation checks like any other read.
#[derive(Debug, Clone)]
struct CachedRead {
    values: Option<Values>,
    version: u64,
}

/// A buffered write, merged per key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BufferedWrite {
    Insert(Values),
    Update(Values),
}

/// One read-set entry as recorded in the history log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadSetEntry {
    pub table: String,
    pub key: Key,
    pub version: u64,
}

/// One write-set entry as recorded in the history log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteSummary {
    pub table: String,
    pub key: Key,
    pub insert: bool,
}

/// Read/write buffer for one root transaction on one partition.
#[derive(Debug, Clone, Default)]
pub struct TxnBuffer {
    reads: BTreeMap<TableKey, CachedRead>,
    writes: BTreeMap<TableKey, BufferedWrite>,
}

impl TxnBuffer {
    pub fn new() -> TxnBuffer {
        TxnBuffer::default()
    }

    fn check_key<'a>(
        catalog: &'a Catalog,
        table: &str,
        key: &[i64],
    ) -> Result<&'a super::TableSchema, TxnError> {
        let schema = catalog.require(table)?;
        if key.len() != schema.key_arity {
            return Err(TxnError::KeyArity(
                table.to_string(),
                key.len(),
                schema.key_arity,
            ));
        }
        Ok(schema)
    }

    /// Committed-state view of a key as this root first saw it, recording the
    /// read-set entry on first touch.
    fn base(&mut self, store: &PartitionStore, table: &str, key: &[i64]) -> &CachedRead {
        let tk = (table.to_string(), key.to_vec());
        self.reads.entry(tk).or_insert_with(|| {
            match store.get(table, key) {
                Some(rec) => CachedRead {
                    values: Some(rec.values.clone()),
                    version: rec.version,
                },
                None => CachedRead { values: None, version: 0 },
            }
        })
    }

    /// Transactional read: own buffered writes overlay the first-read cache,
    /// which overlays the committed store.
    pub fn get(
        &mut self,
        catalog: &Catalog,
        store: &PartitionStore,
        table: &str,
        key: &[i64],
    ) -> Result<Option<Values>, TxnError> {
        Self::check_key(catalog, table, key)?;
        let tk = (table.to_string(), key.to_vec());
        let write = self.writes.get(&tk).cloned();
        match write {
            Some(BufferedWrite::Insert(vals)) => Ok(Some(vals)),
            Some(BufferedWrite::Update(updates)) => {
                let base = self.base(store, table, key);
                let mut vals = base
                    .values
                    .clone()
                    .expect("buffered update over absent base");
                vals.extend(updates);
                Ok(Some(vals))
            }
            None => Ok(self.base(store, table, key).values.clone()),
        }
    }

    /// Buffered insert. Errors if the key is already visible (committed,
    /// cached, or buffered). Records an absence read so validation catches a
    /// concurrent insert of the same key.
    pub fn add(
        &mut self,
        catalog: &Catalog,
        store: &PartitionStore,
        broadcast: bool,
        table: &str,
        key: &[i64],
        values: Values,
    ) -> Result<(), TxnError> {
        let schema = Self::check_key(catalog, table, key)?;
        if schema.replicated && !broadcast {
            return Err(TxnError::ReplicatedWrite(table.to_string()));
        }
        for col in values.keys() {
            if !schema.columns.iter().any(|c| c == col) {
                return Err(TxnError::UnknownColumn(table.to_string(), col.clone()));
            }
        }
        for col in &schema.columns {
            if !values.contains_key(col) {
                return Err(TxnError::MissingColumn(table.to_string(), col.clone()));
            }
        }
        let tk = (table.to_string(), key.to_vec());
        if self.writes.contains_key(&tk) {
            return Err(TxnError::DuplicateKey(table.to_string(), key.to_vec()));
        }
        if self.base(store, table, key).values.is_some() {
            return Err(TxnError::DuplicateKey(table.to_string(), key.to_vec()));
        }
        self.writes.insert(tk, BufferedWrite::Insert(values));
        Ok(())
    }

    /// Buffered field update, merged per key. The target must be visible
    /// (committed or buffered in this root).
    pub fn update(
        &mut self,
        catalog: &Catalog,
        store: &PartitionStore,
        broadcast: bool,
        table: &str,
        key: &[i64],
        updates: Values,
    ) -> Result<(), TxnError> {
        let schema = Self::check_key(catalog, table, key)?;
        if schema.replicated && !broadcast {
            return Err(TxnError::ReplicatedWrite(table.to_string()));
        }
        for col in updates.keys() {
            if !schema.columns.iter().any(|c| c == col) {
                return Err(TxnError::UnknownColumn(table.to_string(), col.clone()));
            }
        }
        let tk = (table.to_string(), key.to_vec());
        let exists_buffered = self.writes.contains_key(&tk);
        if !exists_buffered && self.base(store, table, key).values.is_none() {
            return Err(TxnError::NotFound(table.to_string(), key.to_vec()));
        }
        match self.writes.entry(tk) {
            std::collections::btree_map::Entry::Occupied(mut e) => match e.get_mut() {
                BufferedWrite::Insert(vals) => vals.extend(updates),
                BufferedWrite::Update(prev) => prev.extend(updates),
            },
            std::collections::btree_map::Entry::Vacant(e) => {
                e.insert(BufferedWrite::Update(updates));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }

    pub fn has_writes(&self) -> bool {
        !self.writes.is_empty()
    }

    /// Read set as (table, key, observed version).
    pub fn read_set(&self) -> impl Iterator<Item = (&str, &Key, u64)> {
        self.reads
            .iter()
            .map(|((t, k), r)| (t.as_str(), k, r.version))
    }

    pub fn read_keys(&self) -> impl Iterator<Item = &TableKey> {
        self.reads.keys()
    }

    pub fn write_keys(&self) -> impl Iterator<Item = &TableKey> {
        self.writes.keys()
    }

    pub fn touches(&self, key: &TableKey) -> bool {
        self.reads.contains_key(key) || self.writes.contains_key(key)
    }

    pub fn writes_overlap(&self, other: &TxnBuffer) -> Option<TableKey> {
        // Conflict if our reads or writes intersect their writes, or our
        // writes intersect their reads.
        for k in other.writes.keys() {
            if self.touches(k) {
                return Some(k.clone());
            }
        }
        for k in self.writes.keys() {
            if other.reads.contains_key(k) {
                return Some(k.clone());
            }
        }
        None
    }

    pub fn read_summary(&self) -> Vec<ReadSetEntry> {
        self.reads
            .iter()
            .map(|((t, k), r)| ReadSetEntry {
                table: t.clone(),
                key: k.clone(),
                version: r.version,
            })
            .collect()
    }

    pub fn write_summary(&self) -> Vec<WriteSummary> {
        self.writes
            .iter()
            .map(|((t, k), w)| WriteSummary {
                table: t.clone(),
                key: k.clone(),
                insert: matches!(w, BufferedWrite::Insert(_)),
            })
            .collect()
    }

    /// Applies buffered writes to the committed store. Only called after
    /// validation decided commit.
    pub fn apply(&self, store: &mut PartitionStore) {
        for ((table, key), write) in &self.writes {
            match write {
                BufferedWrite::Insert(vals) => {
                    store.apply_insert(table, key.clone(), vals.clone())
                }
                BufferedWrite::Update(updates) => store.apply_update(table, key, updates),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::TableSchema;
    use crate::value::Fixed;

    fn setup() -> (Catalog, PartitionStore) {
        let mut c = Catalog::new();
        c.define_table(TableSchema::new("district", 2, &["tax", "next_o_id"], false))
            .unwrap();
        c.define_table(TableSchema::new("item", 1, &["price"], true)).unwrap();
        let mut s = PartitionStore::new(1, &c);
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(100_000)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        s.apply_insert("district", vec![1, 1], vals);
        (c, s)
    }

    #[test]
    fn read_your_writes_within_root() {
        let (c, s) = setup();
        let mut buf = TxnBuffer::new();
        let before = buf.get(&c, &s, "district", &[1, 1]).unwrap().unwrap();
        assert_eq!(before["next_o_id"], Scalar::Int(1));
        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(2));
        buf.update(&c, &s, false, "district", &[1, 1], up).unwrap();
        let after = buf.get(&c, &s, "district", &[1, 1]).unwrap().unwrap();
        assert_eq!(after["next_o_id"], Scalar::Int(2));
        // The read set still records the committed version it depends on.
        assert_eq!(buf.read_set().next().unwrap().2, 1);
    }

    #[test]
    fn first_read_is_cached_and_repeatable() {
        let (c, mut s) = setup();
        let mut buf = TxnBuffer::new();
        let v1 = buf.get(&c, &s, "district", &[1, 1]).unwrap().unwrap();
        // Another transaction commits behind this root's back.
        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(9));
        s.apply_update("district", &[1, 1], &up);
        let v2 = buf.get(&c, &s, "district", &[1, 1]).unwrap().unwrap();
        assert_eq!(v1, v2, "re-read must return the first-read snapshot");
        assert_eq!(buf.read_summary()[0].version, 1);
    }

    #[test]
    fn miss_records_absence_read() {
        let (c, s) = setup();
        let mut buf = TxnBuffer::new();
        assert!(buf.get(&c, &s, "district", &[2, 1]).unwrap().is_none());
        let entry = &buf.read_summary()[0];
        assert_eq!(entry.version, 0);
        assert_eq!(entry.key, vec![2, 1]);
    }

    #[test]
    fn add_duplicate_and_replicated_checks() {
        let (c, s) = setup();
        let mut buf = TxnBuffer::new();
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(0)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        let err = buf
            .add(&c, &s, false, "district", &[1, 1], vals.clone())
            .unwrap_err();
        assert!(matches!(err, TxnError::DuplicateKey(_, _)));

        let mut item = BTreeMap::new();
        item.insert("price".to_string(), Scalar::Decimal(Fixed(5_000_000)));
        let err = buf
            .add(&c, &s, false, "item", &[7], item.clone())
            .unwrap_err();
        assert!(matches!(err, TxnError::ReplicatedWrite(_)));
        buf.add(&c, &s, true, "item", &[7], item).unwrap();
    }

    #[test]
    fn update_unknown_column_and_missing_key() {
        let (c, s) = setup();
        let mut buf = TxnBuffer::new();
        let mut up = BTreeMap::new();
        up.insert("nope".to_string(), Scalar::Int(0));
        let err = buf.update(&c, &s, false, "district", &[1, 1], up).unwrap_err();
        assert!(matches!(err, TxnError::UnknownColumn(_, _)));
        let mut up = BTreeMap::new();
        up.insert("tax".to_string(), Scalar::Int(0));
        let err = buf.update(&c, &s, false, "district", &[9, 9], up).unwrap_err();
        assert!(matches!(err, TxnError::NotFound(_, _)));
    }

    #[test]
    fn insert_then_update_merges_and_applies_at_version_one() {
        let (c, mut s) = setup();
        let mut buf = TxnBuffer::new();
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(0)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        buf.add(&c, &s, false, "district", &[1, 2], vals).unwrap();
        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(5));
        buf.update(&c, &s, false, "district", &[1, 2], up).unwrap();
        buf.apply(&mut s);
        let rec = s.get("district", &[1, 2]).unwrap();
        assert_eq!(rec.version, 1);
        assert_eq!(rec.values["next_o_id"], Scalar::Int(5));
    }

    #[test]
    fn symmetric_overlap_detection() {
        let (c, s) = setup();
        // a reads district(1,1); b writes it.
        let mut a = TxnBuffer::new();
        a.get(&c, &s, "district", &[1, 1]).unwrap();
        let mut b = TxnBuffer::new();
        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(3));
        b.update(&c, &s, false, "district", &[1, 1], up).unwrap();
        // b validating against pending a: b's writes hit a's reads.
        assert!(b.writes_overlap(&a).is_some());
        // a validating against pending b: a's reads hit b's writes.
        assert!(a.writes_overlap(&b).is_some());
        let disjoint = TxnBuffer::new();
        assert!(a.writes_overlap(&disjoint).is_none());
    }
}
