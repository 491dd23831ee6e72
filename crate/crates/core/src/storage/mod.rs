//! Partition-local, versioned, in-memory tables.
//!
//! Every partition executor owns one [`PartitionStore`]. All transactional
//! reads and writes flow through a [`TxnBuffer`] (one per root transaction
//! per partition) and only reach the store when the root commits. Data
//! placement is residency-by-creation: a record lives on the partition whose
//! transaction inserted it, and a key that resides elsewhere is simply a
//! local miss.

mod buffer;

pub use buffer::{BufferedWrite, ReadSetEntry, TxnBuffer, WriteSummary};

use crate::error::{EngineError, TxnError};
use crate::value::{Key, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Schema of one table, identical on every partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub key_arity: usize,
    pub columns: Vec<String>,
    pub replicated: bool,
}

impl TableSchema {
    pub fn new(
        name: impl Into<String>,
        key_arity: usize,
        columns: &[&str],
        replicated: bool,
    ) -> TableSchema {
        TableSchema {
            name: name.into(),
            key_arity,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            replicated,
        }
    }
}

/// The set of table definitions, fixed before the cluster starts.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    tables: BTreeMap<String, TableSchema>,
}

impl Catalog {
    pub fn new() -> Catalog {
        Catalog::default()
    }

    /// Registers a table. Errors on duplicate names, zero key arity, and
    /// duplicate column names.
    pub fn define_table(&mut self, schema: TableSchema) -> Result<(), EngineError> {
        if schema.key_arity == 0 {
            return Err(EngineError::ZeroKeyArity(schema.name));
        }
        let mut seen = std::collections::BTreeSet::new();
        for col in &schema.columns {
            if !seen.insert(col.clone()) {
                return Err(EngineError::DuplicateColumn(schema.name, col.clone()));
            }
        }
        if self.tables.contains_key(&schema.name) {
            return Err(EngineError::DuplicateTable(schema.name));
        }
        self.tables.insert(schema.name.clone(), schema);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TableSchema> {
        self.tables.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&TableSchema, TxnError> {
        self.tables
            .get(name)
            .ok_or_else(|| TxnError::UnknownTable(name.to_string()))
    }

    pub fn tables(&self) -> impl Iterator<Item = &TableSchema> {
        self.tables.values()
    }
}

/// A committed record: column values plus a commit counter that increases by
/// exactly one for every committed transaction that wrote the key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub values: BTreeMap<String, Scalar>,
    pub version: u64,
}

type Table = BTreeMap<Key, Record>;

/// All committed data owned by one logical partition.
#[derive(Debug, Clone)]
pub struct PartitionStore {
    partition_id: u32,
    tables: BTreeMap<String, Table>,
}

impl PartitionStore {
    /// An empty store with one (empty) table per catalog entry.
    pub fn new(partition_id: u32, catalog: &Catalog) -> PartitionStore {
        let tables = catalog
            .tables()
            .map(|s| (s.name.clone(), Table::new()))
            .collect();
        PartitionStore { partition_id, tables }
    }

    pub fn partition_id(&self) -> u32 {
        self.partition_id
    }

    pub fn get(&self, table: &str, key: &[i64]) -> Option<&Record> {
        self.tables.get(table).and_then(|t| t.get(key))
    }

    /// Committed version of a key; 0 means absent. Version 0 read-set
    /// entries are how absence reads get validated.
    pub fn version_of(&self, table: &str, key: &[i64]) -> u64 {
        self.get(table, key).map(|r| r.version).unwrap_or(0)
    }

    pub fn table_len(&self, table: &str) -> usize {
        self.tables.get(table).map(|t| t.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.tables.values().all(|t| t.is_empty())
    }

    pub fn scan(&self, table: &str) -> impl Iterator<Item = (&Key, &Record)> {
        self.tables.get(table).into_iter().flat_map(|t| t.iter())
    }

    /// Applies a committed insert. Callers have already validated absence.
    pub(crate) fn apply_insert(&mut self, table: &str, key: Key, values: BTreeMap<String, Scalar>) {
        let t = self.tables.get_mut(table).expect("table exists");
        let prev = t.insert(key, Record { values, version: 1 });
        debug_assert!(prev.is_none(), "insert over committed key");
    }

    /// Applies a committed update: merges the changed fields and bumps the
    /// version by exactly one.
    pub(crate) fn apply_update(
        &mut self,
        table: &str,
        key: &[i64],
        updates: &BTreeMap<String, Scalar>,
    ) {
        let rec = self
            .tables
            .get_mut(table)
            .and_then(|t| t.get_mut(key))
            .expect("update target exists");
        for (col, val) in updates {
            rec.values.insert(col.clone(), val.clone());
        }
        rec.version += 1;
    }

    /// Order-independent digest of all committed `(table, key, values)`
    /// triples. Tables iterate in name order and records in key order, so
    /// the digest depends only on content, never on commit interleaving.
    /// Versions are deliberately excluded.
    pub fn digest(&self, catalog: &Catalog, include_replicated: bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, table) in &self.tables {
            let replicated = catalog.get(name).map(|s| s.replicated).unwrap_or(false);
            if replicated && !include_replicated {
                continue;
            }
            for (key, rec) in table {
                hasher.update(record_bytes(name, key, rec));
            }
        }
        hasher.finalize().into()
    }
}

/// Canonical bytes for one record, used by digests.
fn record_bytes(table: &str, key: &[i64], rec: &Record) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    out.extend_from_slice(table.as_bytes());
    out.extend_from_slice(&(key.len() as u32).to_le_bytes());
    for k in key {
        out.extend_from_slice(&k.to_le_bytes());
    }
    out.extend_from_slice(&(rec.values.len() as u32).to_le_bytes());
    for (col, val) in &rec.values {
        out.extend_from_slice(&(col.len() as u32).to_le_bytes());
        out.extend_from_slice(col.as_bytes());
        val.encode_into(&mut out);
    }
    out
}

/// Digest over the union of several stores' records (order-independent, so
/// the result is invariant under how records are placed across partitions).
/// Used to compare deployments with different partition counts.
pub fn combined_digest(
    stores: &[&PartitionStore],
    catalog: &Catalog,
    include_replicated: bool,
) -> [u8; 32] {
    let mut lines: Vec<Vec<u8>> = Vec::new();
    for store in stores {
        for (name, table) in &store.tables {
            let replicated = catalog.get(name).map(|s| s.replicated).unwrap_or(false);
            if replicated && !include_replicated {
                continue;
            }
            for (key, rec) in table {
                lines.push(record_bytes(name, key, rec));
            }
        }
    }
    lines.sort();
    let mut hasher = Sha256::new();
    for line in lines {
        hasher.update(line);
    }
    hasher.finalize().into()
}

pub fn digest_hex(d: &[u8; 32]) -> String {
    hex::encode(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::Fixed;

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.define_table(TableSchema::new("item", 1, &["price", "name"], true))
            .unwrap();
        c.define_table(TableSchema::new("district", 2, &["tax", "next_o_id"], false))
            .unwrap();
        c
    }

    #[test]
    fn define_table_rejects_duplicates_and_zero_arity() {
        let mut c = catalog();
        let err = c
            .define_table(TableSchema::new("district", 2, &["tax"], false))
            .unwrap_err();
        assert_eq!(err, EngineError::DuplicateTable("district".into()));
        let err = c
            .define_table(TableSchema::new("bad", 0, &["x"], false))
            .unwrap_err();
        assert_eq!(err, EngineError::ZeroKeyArity("bad".into()));
        let err = c
            .define_table(TableSchema::new("dup", 1, &["x", "x"], false))
            .unwrap_err();
        assert!(matches!(err, EngineError::DuplicateColumn(_, _)));
    }

    #[test]
    fn versions_bump_by_one_per_committed_update() {
        let c = catalog();
        let mut s = PartitionStore::new(1, &c);
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(100_000)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        s.apply_insert("district", vec![1, 1], vals);
        assert_eq!(s.version_of("district", &[1, 1]), 1);

        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(2));
        s.apply_update("district", &[1, 1], &up);
        assert_eq!(s.version_of("district", &[1, 1]), 2);
        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(3));
        s.apply_update("district", &[1, 1], &up);
        assert_eq!(s.version_of("district", &[1, 1]), 3);
        assert_eq!(
            s.get("district", &[1, 1]).unwrap().values["next_o_id"],
            Scalar::Int(3)
        );
    }

    #[test]
    fn empty_digest_is_fixed_and_content_changes_it() {
        let c = catalog();
        let a = PartitionStore::new(0, &c);
        let b = PartitionStore::new(1, &c);
        // Same (empty) content, different partition ids: digests equal.
        assert_eq!(a.digest(&c, true), b.digest(&c, true));

        let mut s = PartitionStore::new(0, &c);
        let before = s.digest(&c, true);
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(0)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        s.apply_insert("district", vec![1, 1], vals);
        assert_ne!(before, s.digest(&c, true));

        let mut up = BTreeMap::new();
        up.insert("next_o_id".to_string(), Scalar::Int(2));
        let mid = s.digest(&c, true);
        s.apply_update("district", &[1, 1], &up);
        assert_ne!(mid, s.digest(&c, true));
    }

    #[test]
    fn combined_digest_is_placement_invariant() {
        let c = catalog();
        let mut one = PartitionStore::new(0, &c);
        let mut vals = BTreeMap::new();
        vals.insert("tax".to_string(), Scalar::Decimal(Fixed(0)));
        vals.insert("next_o_id".to_string(), Scalar::Int(1));
        one.apply_insert("district", vec![1, 1], vals.clone());
        one.apply_insert("district", vec![2, 1], vals.clone());

        let mut a = PartitionStore::new(0, &c);
        let mut b = PartitionStore::new(1, &c);
        a.apply_insert("district", vec![1, 1], vals.clone());
        b.apply_insert("district", vec![2, 1], vals);

        assert_eq!(
            combined_digest(&[&one], &c, false),
            combined_digest(&[&a, &b], &c, false)
        );
    }
}
