//! The transaction context handed to procedure bodies, and the host
//! interface that backs it. Two hosts exist: the deterministic simulated
//! cluster, and the serial replay engine used by the serializability oracle.

use crate::error::TxnError;
use crate::procmodel::{ProcResult, ProcedureRegistry};
use crate::value::{Scalar, Value};
use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::task::{Context, Poll};

pub type Values = BTreeMap<String, Scalar>;

/// Identifies one executing (sub)transaction body.
#[derive(Debug, Clone, Copy)]
pub struct BodySpan {
    /// Root transaction id; all fragments merge into this commit scope.
    pub root: u64,
    /// Outermost body instance on this partition (results route here).
    pub task: u64,
    pub partition: u32,
    pub depth: u32,
    /// Broadcast roots may write replicated tables.
    pub broadcast: bool,
}

/// A remote subtransaction invocation queued by `exec_sub`/`parallel_exec`.
#[derive(Debug, Clone)]
pub struct PendingCall {
    pub txn: String,
    pub args: Value,
    pub target: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WaitId(pub u64);

/// Everything a transaction context needs from its runtime. Storage
/// operations are restricted to the span's own partition by construction:
/// the host resolves them against that partition's store and nothing else.
pub trait TxnHost {
    fn num_logical(&self) -> u32;
    fn registry(&self) -> Rc<ProcedureRegistry>;

    fn get(&self, span: &BodySpan, table: &str, key: &[i64]) -> Result<Option<Values>, TxnError>;
    fn add(&self, span: &BodySpan, table: &str, key: &[i64], values: Values)
        -> Result<(), TxnError>;
    fn update(
        &self,
        span: &BodySpan,
        table: &str,
        key: &[i64],
        updates: Values,
    ) -> Result<(), TxnError>;

    /// Ships all calls before the caller starts waiting, and returns the
    /// handle the caller's future polls.
    fn start_calls(&self, span: &BodySpan, calls: Vec<PendingCall>) -> Result<WaitId, TxnError>;
    /// `Some(results)` in registration order once every call completed.
    fn poll_calls(&self, wait: WaitId) -> Option<Vec<ProcResult>>;

    /// A child body returned an error; the root must abort even if the
    /// caller swallows the error, because the child may have buffered
    /// partial writes.
    fn poison(&self, span: &BodySpan, err: &TxnError);
}

/// Handle through which a procedure body touches its partition's data and
/// invokes subtransactions. Cheap to clone; owned by the body's future.
#[derive(Clone)]
pub struct ProcCtx {
    host: Rc<dyn TxnHost>,
    span: BodySpan,
}

impl ProcCtx {
    pub fn new(host: Rc<dyn TxnHost>, span: BodySpan) -> ProcCtx {
        ProcCtx { host, span }
    }

    pub fn partition(&self) -> u32 {
        self.span.partition
    }

    pub fn depth(&self) -> u32 {
        self.span.depth
    }

    /// Latest committed record visible on this partition, overlaid with the
    /// root's own buffered writes; `None` when the key does not reside here.
    pub fn get(&self, table: &str, key: &[i64]) -> Result<Option<Row>, TxnError> {
        Ok(self.host.get(&self.span, table, key)?.map(Row))
    }

    /// Like `get`, but a miss is an error that aborts the transaction.
    pub fn get_required(&self, table: &str, key: &[i64]) -> Result<Row, TxnError> {
        self.get(table, key)?
            .ok_or_else(|| TxnError::NotFound(table.to_string(), key.to_vec()))
    }

    pub fn add(&self, table: &str, key: &[i64], values: Values) -> Result<(), TxnError> {
        self.host.add(&self.span, table, key, values)
    }

    pub fn update(&self, table: &str, key: &[i64], updates: Values) -> Result<(), TxnError> {
        self.host.update(&self.span, table, key, updates)
    }

    pub fn map_partition(&self, mapper: &str, args: &Value) -> Result<u32, TxnError> {
        self.host
            .registry()
            .map_partition(mapper, args, self.host.num_logical())
    }

    /// Invokes `txn` as a subtransaction on `target`. Same-partition targets
    /// run inline in the root's local scope with zero messages; remote
    /// targets ship an invoke and block this body until the result returns.
    /// Either way the child joins the root's commit scope.
    pub async fn exec_sub(&self, txn: &str, args: Value, target: u32) -> ProcResult {
        let num = self.host.num_logical();
        if target >= num {
            return Err(TxnError::InvalidTarget(target, num));
        }
        if target == self.span.partition {
            return self.run_inline(txn, args).await;
        }
        let wait = self.host.start_calls(
            &self.span,
            vec![PendingCall { txn: txn.to_string(), args, target }],
        )?;
        let mut results = CallWait { host: self.host.clone(), wait }.await;
        let result = results.pop().expect("one call, one result");
        if let Err(e) = &result {
            self.host.poison(&self.span, e);
        }
        result
    }

    /// Fans `txn` out to pairwise-distinct partitions: ships every remote
    /// invoke, then runs a same-partition child (if any) while the remote
    /// children execute concurrently, then joins. Results are returned in
    /// input order; any child error aborts the root.
    pub async fn parallel_exec(
        &self,
        txn: &str,
        args_list: Vec<Value>,
        targets: Vec<u32>,
    ) -> Result<Vec<Value>, TxnError> {
        if args_list.len() != targets.len() {
            return Err(TxnError::ParallelArity(args_list.len(), targets.len()));
        }
        let num = self.host.num_logical();
        let mut seen = std::collections::BTreeSet::new();
        for &t in &targets {
            if t >= num {
                return Err(TxnError::InvalidTarget(t, num));
            }
            if !seen.insert(t) {
                return Err(TxnError::DuplicateTarget(t));
            }
        }
        if targets.is_empty() {
            return Ok(Vec::new());
        }

        let mut remote = Vec::new();
        let mut inline: Option<(usize, Value)> = None;
        let mut remote_idx = Vec::new();
        for (i, (args, &target)) in args_list.into_iter().zip(&targets).enumerate() {
            if target == self.span.partition {
                inline = Some((i, args));
            } else {
                remote_idx.push(i);
                remote.push(PendingCall { txn: txn.to_string(), args, target });
            }
        }

        let wait = if remote.is_empty() {
            None
        } else {
            Some(self.host.start_calls(&self.span, remote)?)
        };

        let mut slots: Vec<Option<ProcResult>> = vec![None; targets.len()];
        if let Some((i, args)) = inline {
            slots[i] = Some(self.run_inline(txn, args).await);
        }
        if let Some(wait) = wait {
            let results = CallWait { host: self.host.clone(), wait }.await;
            for (i, r) in remote_idx.into_iter().zip(results) {
                slots[i] = Some(r);
            }
        }

        let mut out = Vec::with_capacity(slots.len());
        for slot in slots {
            match slot.expect("every slot filled") {
                Ok(v) => out.push(v),
                Err(e) => {
                    self.host.poison(&self.span, &e);
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    /// Same-partition subtransaction: shares the root's read/write scope.
    async fn run_inline(&self, txn: &str, args: Value) -> ProcResult {
        let registry = self.host.registry();
        let body = match registry.procedure(txn) {
            Ok(p) => p.body.clone(),
            Err(e) => {
                self.host.poison(&self.span, &e);
                return Err(e);
            }
        };
        let child = ProcCtx {
            host: self.host.clone(),
            span: BodySpan { depth: self.span.depth + 1, ..self.span },
        };
        let result = body(child, args).await;
        if let Err(e) = &result {
            self.host.poison(&self.span, e);
        }
        result
    }
}

/// Read-only view of one record's values with typed accessors.
#[derive(Debug, Clone)]
pub struct Row(pub Values);

impl Row {
    fn scalar(&self, col: &str) -> Result<&Scalar, TxnError> {
        self.0
            .get(col)
            .ok_or_else(|| TxnError::BadArgs(format!("row has no column {col:?}")))
    }

    pub fn int(&self, col: &str) -> Result<i64, TxnError> {
        self.scalar(col)?
            .as_int()
            .ok_or_else(|| TxnError::BadArgs(format!("column {col:?} is not an integer")))
    }

    pub fn decimal(&self, col: &str) -> Result<crate::value::Fixed, TxnError> {
        self.scalar(col)?
            .as_decimal()
            .ok_or_else(|| TxnError::BadArgs(format!("column {col:?} is not a decimal")))
    }

    pub fn text(&self, col: &str) -> Result<&str, TxnError> {
        self.scalar(col)?
            .as_text()
            .ok_or_else(|| TxnError::BadArgs(format!("column {col:?} is not a string")))
    }
}

/// Builds a column-value map: `row(&[("tax", tax.into()), ("next_o_id", 1.into())])`.
pub fn row_values(pairs: &[(&str, Scalar)]) -> Values {
    pairs
        .iter()
        .map(|(c, v)| (c.to_string(), v.clone()))
        .collect()
}

/// Future that waits for a group of remote subtransaction results. The
/// simulator polls the owning body exactly when results arrive, so no waker
/// machinery is needed.
struct CallWait {
    host: Rc<dyn TxnHost>,
    wait: WaitId,
}

impl Future for CallWait {
    type Output = Vec<ProcResult>;

    fn poll(self: Pin<&mut Self>, _cx: &mut Context<'_>) -> Poll<Self::Output> {
        match self.host.poll_calls(self.wait) {
            Some(results) => Poll::Ready(results),
            None => Poll::Pending,
        }
    }
}

/// Polls a body future once with a no-op waker. The deterministic hosts
/// re-poll exactly when a pending wait completes.
pub fn poll_body(fut: &mut crate::procmodel::BodyFuture) -> Poll<ProcResult> {
    let waker = std::task::Waker::noop();
    let mut cx = Context::from_waker(waker);
    fut.as_mut().poll(&mut cx)
}
