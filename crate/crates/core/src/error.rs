//! Error types: `EngineError` for configuration and lifecycle failures,
//! `TxnError` for failures inside a running transaction (which abort the
//! root without touching committed state).

use crate::value::Key;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("duplicate table {0:?}")]
    DuplicateTable(String),
    #[error("table {0:?} has zero key arity")]
    ZeroKeyArity(String),
    #[error("duplicate column {1:?} in table {0:?}")]
    DuplicateColumn(String, String),
    #[error("duplicate mapper {0:?}")]
    DuplicateMapper(String),
    #[error("duplicate procedure {0:?}")]
    DuplicateProcedure(String),
    #[error("procedure {0:?} names unknown mapper {1:?}")]
    UnknownMapper(String, String),
    #[error("unknown procedure {0:?}")]
    UnknownProcedure(String),
    #[error("logical partition {0} is not mapped to a physical worker")]
    UnmappedPartition(u32),
    #[error("invalid cluster config: {0}")]
    InvalidConfig(String),
    #[error("simulated time exceeded {cap_us}us with work outstanding (livelock guard)")]
    Livelock { cap_us: u64 },
    #[error("digest requested while {0} transactions are in flight")]
    InFlight(usize),
    #[error("database is not empty")]
    NotEmpty,
    #[error("initialization transaction failed: {0}")]
    LoadFailed(String),
    #[error("malformed history: {0}")]
    MalformedHistory(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EngineError {
    fn from(e: std::io::Error) -> Self {
        EngineError::Io(e.to_string())
    }
}

/// Errors raised by storage and subtransaction operations during a procedure
/// body. Any of these aborts the root transaction with a user-error reason.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TxnError {
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("key arity mismatch for table {0:?}: got {1}, schema wants {2}")]
    KeyArity(String, usize, usize),
    #[error("record {1:?} not found in table {0:?}")]
    NotFound(String, Key),
    #[error("duplicate key {1:?} in table {0:?}")]
    DuplicateKey(String, Key),
    #[error("unknown column {1:?} in table {0:?}")]
    UnknownColumn(String, String),
    #[error("missing column {1:?} for table {0:?}")]
    MissingColumn(String, String),
    #[error("write to replicated table {0:?} outside a broadcast transaction")]
    ReplicatedWrite(String),
    #[error("mapper {0:?} returned partition {1} outside [0, {2})")]
    MapperRange(String, i64, u32),
    #[error("unknown mapper {0:?}")]
    UnknownMapperName(String),
    #[error("unknown procedure {0:?}")]
    UnknownProcedureName(String),
    #[error("subtransaction target partition {0} outside [0, {1})")]
    InvalidTarget(u32, u32),
    #[error("parallel exec targets must be pairwise distinct (partition {0} repeats)")]
    DuplicateTarget(u32),
    #[error("parallel exec arity mismatch: {0} args for {1} partitions")]
    ParallelArity(usize, usize),
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error("{0}")]
    User(String),
}

impl TxnError {
    pub fn user(msg: impl Into<String>) -> TxnError {
        TxnError::User(msg.into())
    }
}
