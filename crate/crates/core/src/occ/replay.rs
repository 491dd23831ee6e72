//! Serial replay oracle. Re-executes the committed history, one root at a
//! time in global commit order, against a fresh copy of the initial state,
//! using the same procedure bodies but none of the simulator or commit
//! machinery: every subtransaction resolves inline and every commit applies
//! immediately. A run is serializable iff the replay reproduces every
//! committed return value and every partition's final digest.

use crate::error::TxnError;
use crate::occ::history::{HistoryRecord, RecordedOutcome};
use crate::procmodel::{
    poll_body, BodySpan, PendingCall, ProcCtx, ProcResult, ProcedureRegistry, TxnHost, Values,
    WaitId,
};
use crate::storage::{digest_hex, Catalog, PartitionStore, TxnBuffer};
use crate::value::Value;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::{Rc, Weak};
use std::task::Poll;

/// Evidence that a history is not equivalent to its serial replay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Counterexample {
    Malformed(String),
    ReplayAborted { global_index: u64, root_id: u64, error: String },
    ReturnMismatch { global_index: u64, root_id: u64, live: Value, replay: Value },
    DigestMismatch { partition: u32, live: String, replay: String },
}

impl fmt::Display for Counterexample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Counterexample::Malformed(msg) => write!(f, "malformed history: {msg}"),
            Counterexample::ReplayAborted { global_index, root_id, error } => write!(
                f,
                "root {root_id} (global index {global_index}) committed live but aborted in \
                 serial replay: {error}"
            ),
            Counterexample::ReturnMismatch { global_index, root_id, live, replay } => write!(
                f,
                "root {root_id} (global index {global_index}) returned {live} live but {replay} \
                 in serial replay"
            ),
            Counterexample::DigestMismatch { partition, live, replay } => write!(
                f,
                "partition {partition} final digest {live} (live) != {replay} (serial replay)"
            ),
        }
    }
}

/// Synchronous transaction host: storage ops hit per-partition fragments
/// exactly like the simulator's, but remote calls execute their child bodies
/// on the spot, so a body future completes in a single poll.
struct SerialHost {
    self_ref: RefCell<Weak<SerialHost>>,
    catalog: Catalog,
    registry: Rc<ProcedureRegistry>,
    num_logical: u32,
    stores: RefCell<Vec<PartitionStore>>,
    fragments: RefCell<HashMap<u32, TxnBuffer>>,
    waits: RefCell<HashMap<u64, Vec<ProcResult>>>,
    poisoned: RefCell<Option<TxnError>>,
    next_id: Cell<u64>,
}

impl SerialHost {
    fn rc(&self) -> Rc<SerialHost> {
        self.self_ref.borrow().upgrade().expect("host outlives bodies")
    }

    fn next(&self) -> u64 {
        let id = self.next_id.get() + 1;
        self.next_id.set(id);
        id
    }

    /// Runs one body to completion; the serial host resolves every wait
    /// inline, so a single poll always finishes.
    fn run_span(&self, txn: &str, args: Value, span: BodySpan) -> ProcResult {
        let body = self.registry.procedure(txn)?.body.clone();
        let ctx = ProcCtx::new(self.rc() as Rc<dyn TxnHost>, span);
        let mut fut = body(ctx, args);
        match poll_body(&mut fut) {
            Poll::Ready(result) => result,
            Poll::Pending => unreachable!("serial host resolves all waits inline"),
        }
    }
}

impl TxnHost for SerialHost {
    fn num_logical(&self) -> u32 {
        self.num_logical
    }

    fn registry(&self) -> Rc<ProcedureRegistry> {
        self.registry.clone()
    }

    fn get(&self, span: &BodySpan, table: &str, key: &[i64]) -> Result<Option<Values>, TxnError> {
        let stores = self.stores.borrow();
        let mut frags = self.fragments.borrow_mut();
        frags
            .entry(span.partition)
            .or_default()
            .get(&self.catalog, &stores[span.partition as usize], table, key)
    }

    fn add(
        &self,
        span: &BodySpan,
        table: &str,
        key: &[i64],
        values: Values,
    ) -> Result<(), TxnError> {
        let stores = self.stores.borrow();
        let mut frags = self.fragments.borrow_mut();
        frags.entry(span.partition).or_default().add(
            &self.catalog,
            &stores[span.partition as usize],
            span.broadcast,
            table,
            key,
            values,
        )
    }

    fn update(
        &self,
        span: &BodySpan,
        table: &str,
        key: &[i64],
        updates: Values,
    ) -> Result<(), TxnError> {
        let stores = self.stores.borrow();
        let mut frags = self.fragments.borrow_mut();
        frags.entry(span.partition).or_default().update(
            &self.catalog,
            &stores[span.partition as usize],
            span.broadcast,
            table,
            key,
            updates,
        )
    }

    fn start_calls(&self, span: &BodySpan, calls: Vec<PendingCall>) -> Result<WaitId, TxnError> {
        let mut results = Vec::with_capacity(calls.len());
        for call in calls {
            let child_span = BodySpan {
                root: span.root,
                task: self.next(),
                partition: call.target,
                depth: span.depth + 1,
                broadcast: span.broadcast,
            };
            results.push(self.run_span(&call.txn, call.args, child_span));
        }
        let id = self.next();
        self.waits.borrow_mut().insert(id, results);
        Ok(WaitId(id))
    }

    fn poll_calls(&self, wait: WaitId) -> Option<Vec<ProcResult>> {
        self.waits.borrow_mut().remove(&wait.0)
    }

    fn poison(&self, _span: &BodySpan, err: &TxnError) {
        let mut p = self.poisoned.borrow_mut();
        if p.is_none() {
            *p = Some(err.clone());
        }
    }
}

/// Single-threaded engine that executes roots serially with immediate
/// commits. Backs the serializability oracle and the negative tests.
pub struct SerialEngine {
    host: Rc<SerialHost>,
}

impl SerialEngine {
    pub fn new(
        catalog: Catalog,
        registry: Rc<ProcedureRegistry>,
        num_logical: u32,
        stores: Vec<PartitionStore>,
    ) -> SerialEngine {
        assert_eq!(stores.len(), num_logical as usize);
        let host = Rc::new(SerialHost {
            self_ref: RefCell::new(Weak::new()),
            catalog,
            registry,
            num_logical,
            stores: RefCell::new(stores),
            fragments: RefCell::new(HashMap::new()),
            waits: RefCell::new(HashMap::new()),
            poisoned: RefCell::new(None),
            next_id: Cell::new(0),
        });
        *host.self_ref.borrow_mut() = Rc::downgrade(&host);
        SerialEngine { host }
    }

    /// Executes one root to completion; on success its buffered writes apply
    /// immediately (partition order, then key order — deterministic).
    pub fn execute_root(&self, txn: &str, args: &Value) -> ProcResult {
        let host = &self.host;
        host.fragments.borrow_mut().clear();
        *host.poisoned.borrow_mut() = None;

        let broadcast = host.registry.procedure(txn)?.broadcast;
        let root = host.next();
        let result = if broadcast {
            let mut value = Value::Null;
            let mut failed = None;
            for partition in 0..host.num_logical {
                let span = BodySpan {
                    root,
                    task: host.next(),
                    partition,
                    depth: 0,
                    broadcast: true,
                };
                match host.run_span(txn, args.clone(), span) {
                    Ok(v) if partition == 0 => value = v,
                    Ok(_) => {}
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            match failed {
                None => Ok(value),
                Some(e) => Err(e),
            }
        } else {
            let partition = host.registry.root_partition(txn, args, host.num_logical)?;
            let span = BodySpan { root, task: host.next(), partition, depth: 0, broadcast: false };
            host.run_span(txn, args.clone(), span)
        };

        let poisoned = host.poisoned.borrow().clone();
        match (result, poisoned) {
            (Ok(v), None) => {
                let mut frags: Vec<(u32, TxnBuffer)> =
                    host.fragments.borrow_mut().drain().collect();
                frags.sort_by_key(|(p, _)| *p);
                let mut stores = host.stores.borrow_mut();
                for (partition, frag) in frags {
                    frag.apply(&mut stores[partition as usize]);
                }
                Ok(v)
            }
            (Ok(_), Some(e)) | (Err(e), _) => {
                host.fragments.borrow_mut().clear();
                Err(e)
            }
        }
    }

    pub fn stores(&self) -> Vec<PartitionStore> {
        self.host.stores.borrow().clone()
    }

    pub fn digests(&self, include_replicated: bool) -> Vec<[u8; 32]> {
        let stores = self.host.stores.borrow();
        stores
            .iter()
            .map(|s| s.digest(&self.host.catalog, include_replicated))
            .collect()
    }
}

/// Replays every committed record in global-index order on a copy of the
/// initial state and compares return values and final per-partition digests
/// against the live run.
pub fn verify_serializability(
    catalog: &Catalog,
    registry: Rc<ProcedureRegistry>,
    num_logical: u32,
    initial_stores: Vec<PartitionStore>,
    records: &[HistoryRecord],
    live_final_digests: &[[u8; 32]],
) -> Result<(), Counterexample> {
    let mut committed: Vec<&HistoryRecord> = records.iter().filter(|r| r.committed()).collect();
    committed.sort_by_key(|r| r.global_index);
    for w in committed.windows(2) {
        if w[0].global_index == w[1].global_index {
            return Err(Counterexample::Malformed(format!(
                "duplicate global index {}",
                w[0].global_index
            )));
        }
    }

    let engine = SerialEngine::new(catalog.clone(), registry, num_logical, initial_stores);
    for rec in committed {
        let RecordedOutcome::Committed { value: live_value } = &rec.outcome else {
            unreachable!("filtered to committed");
        };
        match engine.execute_root(&rec.txn, &rec.args) {
            Ok(replay_value) => {
                if &replay_value != live_value {
                    return Err(Counterexample::ReturnMismatch {
                        global_index: rec.global_index,
                        root_id: rec.root_id,
                        live: live_value.clone(),
                        replay: replay_value,
                    });
                }
            }
            Err(e) => {
                return Err(Counterexample::ReplayAborted {
                    global_index: rec.global_index,
                    root_id: rec.root_id,
                    error: e.to_string(),
                });
            }
        }
    }

    let replay_digests = engine.digests(true);
    if replay_digests.len() != live_final_digests.len() {
        return Err(Counterexample::Malformed(format!(
            "digest count mismatch: {} live vs {} replay",
            live_final_digests.len(),
            replay_digests.len()
        )));
    }
    for (partition, (live, replay)) in
        live_final_digests.iter().zip(&replay_digests).enumerate()
    {
        if live != replay {
            return Err(Counterexample::DigestMismatch {
                partition: partition as u32,
                live: digest_hex(live),
                replay: digest_hex(replay),
            });
        }
    }
    Ok(())
}
