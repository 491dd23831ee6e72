//! Deterministic in-process cluster simulation.
//!
//! One physical worker per configured machine hosts one or more logical
//! partition executors. The reference mode is a single-threaded
//! discrete-event loop: events are processed in `(deliver_time, src, seqno)`
//! order, each event occupies its destination's physical worker for
//! `exec_cost_us` of simulated time (FIFO per worker), and messages between
//! distinct physical workers take `net_latency_us` one way (0 when
//! co-located). Given a config, a seed, and a submission sequence, final
//! digests, the history log, and the metrics report are fully determined.

mod metrics;

pub(crate) use metrics::MetricsCollector;
pub use metrics::{AbortCounts, MetricsReport};

use crate::error::{EngineError, TxnError};
use crate::occ::{
    self, AbortReason, Decision, HistoryLog, HistoryRecord, ParticipantRecord, PendingSet,
    RecordedOutcome, Verdict,
};
use crate::procmodel::{
    poll_body, BodyFuture, BodySpan, PendingCall, ProcCtx, ProcResult, ProcedureRegistry, TxnHost,
    Values, WaitId,
};
use crate::storage::{combined_digest, Catalog, PartitionStore, TxnBuffer};
use crate::value::{canonical_bytes, Value};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, VecDeque};
use std::fmt;
use std::rc::{Rc, Weak};
use std::task::Poll;

/// Cluster topology, latency model, and simulation knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub num_logical: u32,
    pub num_physical: u32,
    /// logical partition -> physical worker.
    pub mapping: Vec<u32>,
    /// One-way latency between distinct physical workers, microseconds.
    pub net_latency_us: u64,
    /// Simulated time one event occupies its worker.
    pub exec_cost_us: u64,
    pub seed: u64,
    /// Optional +/- fraction applied to each remote delivery, drawn from the
    /// seeded PRNG. 0 disables jitter.
    pub latency_jitter: f64,
    /// Livelock guard: the run fails if simulated time passes this.
    pub max_sim_time_us: u64,
}

impl ClusterConfig {
    /// Identity-ish default: logical partition `l` on worker `l % num_physical`.
    pub fn uniform(num_logical: u32, num_physical: u32, net_latency_us: u64, seed: u64) -> Self {
        ClusterConfig {
            num_logical,
            num_physical,
            mapping: (0..num_logical).map(|l| l % num_physical.max(1)).collect(),
            net_latency_us,
            exec_cost_us: 10,
            seed,
            latency_jitter: 0.0,
            max_sim_time_us: 10_000_000_000_000,
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.num_logical == 0 {
            return Err(EngineError::InvalidConfig("num_logical must be >= 1".into()));
        }
        if self.num_physical == 0 {
            return Err(EngineError::InvalidConfig("num_physical must be >= 1".into()));
        }
        if self.mapping.len() != self.num_logical as usize {
            return Err(EngineError::UnmappedPartition(self.mapping.len() as u32));
        }
        if let Some(bad) = self.mapping.iter().find(|&&p| p >= self.num_physical) {
            return Err(EngineError::InvalidConfig(format!(
                "mapping targets worker {bad} but num_physical is {}",
                self.num_physical
            )));
        }
        if !(0.0..1.0).contains(&self.latency_jitter) {
            return Err(EngineError::InvalidConfig("latency_jitter must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Parses the key-value config format: one `key value` (or `key=value`)
    /// pair per line, `#` comments. Keys match the field names; `mapping` is
    /// either `auto` or comma-separated `logical:physical` pairs.
    pub fn from_kv_str(text: &str) -> Result<ClusterConfig, EngineError> {
        let mut cfg = ClusterConfig::uniform(1, 1, 0, 0);
        let mut mapping_spec: Option<String> = None;
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| EngineError::InvalidConfig(format!("bad config line {raw:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_u64 = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| EngineError::InvalidConfig(format!("bad value for {key}: {v:?}")))
            };
            match key {
                "num_logical" => cfg.num_logical = parse_u64(value)? as u32,
                "num_physical" => cfg.num_physical = parse_u64(value)? as u32,
                "net_latency_us" => cfg.net_latency_us = parse_u64(value)?,
                "exec_cost_us" => cfg.exec_cost_us = parse_u64(value)?,
                "seed" => cfg.seed = parse_u64(value)?,
                "max_sim_time_us" => cfg.max_sim_time_us = parse_u64(value)?,
                "latency_jitter" => {
                    cfg.latency_jitter = value.parse::<f64>().map_err(|_| {
                        EngineError::InvalidConfig(format!("bad value for {key}: {value:?}"))
                    })?
                }
                "mapping" => mapping_spec = Some(value.to_string()),
                other => {
                    return Err(EngineError::InvalidConfig(format!("unknown config key {other:?}")))
                }
            }
        }
        match mapping_spec.as_deref() {
            None | Some("auto") => {
                cfg.mapping = (0..cfg.num_logical).map(|l| l % cfg.num_physical.max(1)).collect();
            }
            Some(spec) => {
                let mut mapping = vec![u32::MAX; cfg.num_logical as usize];
                for pair in spec.split(',') {
                    let (l, p) = pair
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| EngineError::InvalidConfig(format!("bad mapping {pair:?}")))?;
                    let l: usize = l.trim().parse().map_err(|_| {
                        EngineError::InvalidConfig(format!("bad mapping entry {pair:?}"))
                    })?;
                    let p: u32 = p.trim().parse().map_err(|_| {
                        EngineError::InvalidConfig(format!("bad mapping entry {pair:?}"))
                    })?;
                    if l >= mapping.len() {
                        return Err(EngineError::InvalidConfig(format!(
                            "mapping names logical {l} beyond num_logical"
                        )));
                    }
                    mapping[l] = p;
                }
                if let Some(l) = mapping.iter().position(|&p| p == u32::MAX) {
                    return Err(EngineError::UnmappedPartition(l as u32));
                }
                cfg.mapping = mapping;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Message classes on the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    Invoke,
    Result,
    Validate,
    Vote,
    Decide,
    Broadcast,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MessageKind::Invoke => "invoke",
            MessageKind::Result => "result",
            MessageKind::Validate => "validate",
            MessageKind::Vote => "vote",
            MessageKind::Decide => "decide",
            MessageKind::Broadcast => "broadcast",
        };
        f.write_str(s)
    }
}

/// Where a remote child body reports its result.
#[derive(Debug, Clone, Copy)]
struct ReplyTo {
    partition: u32,
    task: u64,
    wait: u64,
    index: usize,
}

#[derive(Debug)]
enum MsgPayload {
    Invoke { txn: String, args: Value, depth: u32, broadcast: bool, reply: Option<ReplyTo> },
    ResultMsg { reply: ReplyTo, result: ProcResult },
    BroadcastDone { result: ProcResult },
    Validate,
    Vote { verdict: Verdict },
    Decide { decision: Decision },
}

struct OutMsg {
    kind: MessageKind,
    src: u32,
    dst: u32,
    root_id: u64,
    payload_bytes: usize,
    payload: MsgPayload,
}

enum EventPayload {
    Submit { ticket: u64, tag: u64, txn: String, args: Value },
    Message { kind: MessageKind, root_id: u64, payload: MsgPayload },
}

struct Event {
    deliver_us: u64,
    src: u32,
    seq: u64,
    dst: u32,
    payload: EventPayload,
}

impl Event {
    fn order_key(&self) -> (u64, u32, u64) {
        (self.deliver_us, self.src, self.seq)
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.order_key() == other.order_key()
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

enum TaskKind {
    RootBody { root: u64 },
    ChildBody { root: u64, reply: ReplyTo },
    BroadcastBody { root: u64, home: u32 },
}

struct TaskEntry {
    future: BodyFuture,
    kind: TaskKind,
}

struct WaitGroup {
    slots: Vec<Option<ProcResult>>,
    remaining: usize,
}

struct ExecutorState {
    store: PartitionStore,
    fragments: HashMap<u64, TxnBuffer>,
    pending: PendingSet,
    tasks: HashMap<u64, TaskEntry>,
}

#[derive(Debug, Clone, Copy, Default)]
struct WorkerState {
    busy_until_us: u64,
    busy_us: u64,
}

struct RootCoord {
    tag: u64,
    ticket: u64,
    txn: String,
    args: Value,
    home: u32,
    submit_us: u64,
    broadcast: bool,
    outstanding_pieces: u32,
    body_done: bool,
    body_end_us: u64,
    body_value: Option<Value>,
    poisoned: Option<TxnError>,
    participants: BTreeSet<u32>,
    votes: BTreeMap<u32, Verdict>,
    awaiting_votes: bool,
}

/// Result of one root transaction as observed by the submitting client.
#[derive(Debug, Clone, PartialEq)]
pub struct RootOutcome {
    pub ticket: u64,
    pub tag: u64,
    pub root_id: u64,
    pub txn: String,
    pub outcome: TxnOutcome,
    pub submit_us: u64,
    /// When the root body finished, before the commit protocol.
    pub body_end_us: u64,
    pub decide_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TxnOutcome {
    Committed { value: Value, global_index: u64 },
    Aborted { reason: AbortReason, error: String },
}

impl TxnOutcome {
    pub fn committed(&self) -> bool {
        matches!(self, TxnOutcome::Committed { .. })
    }

    pub fn value(&self) -> Option<&Value> {
        match self {
            TxnOutcome::Committed { value, .. } => Some(value),
            TxnOutcome::Aborted { .. } => None,
        }
    }
}

struct GlobalState {
    now_us: u64,
    next_seq: u64,
    next_root: u64,
    next_task: u64,
    next_wait: u64,
    next_ticket: u64,
    commit_counter: u64,
    active_roots: usize,
    roots: HashMap<u64, RootCoord>,
    waits: HashMap<u64, WaitGroup>,
    outbox: Vec<OutMsg>,
    completions: VecDeque<RootOutcome>,
    resolved: HashMap<u64, RootOutcome>,
    history: HistoryLog,
    metrics: MetricsCollector,
    messages_by_kind: BTreeMap<String, u64>,
    rng: ChaCha8Rng,
    trace: Option<Vec<String>>,
}

struct SimHost {
    self_ref: RefCell<Weak<SimHost>>,
    cfg: ClusterConfig,
    catalog: Catalog,
    registry: Rc<ProcedureRegistry>,
    execs: Vec<RefCell<ExecutorState>>,
    workers: RefCell<Vec<WorkerState>>,
    queue: RefCell<BinaryHeap<Reverse<Event>>>,
    global: RefCell<GlobalState>,
}

impl SimHost {
    fn rc(&self) -> Rc<SimHost> {
        self.self_ref.borrow().upgrade().expect("host alive")
    }
}

impl TxnHost for SimHost {
    fn num_logical(&self) -> u32 {
        self.cfg.num_logical
    }

    fn registry(&self) -> Rc<ProcedureRegistry> {
        self.registry.clone()
    }

    fn get(&self, span: &BodySpan, table: &str, key: &[i64]) -> Result<Option<Values>, TxnError> {
        let result = {
            let mut exec = self.execs[span.partition as usize].borrow_mut();
            let e = &mut *exec;
            e.fragments
                .entry(span.root)
                .or_default()
                .get(&self.catalog, &e.store, table, key)
        };
        self.mark_participant(span.root, span.partition);
        result
    }

    fn add(
        &self,
        span: &BodySpan,
        table: &str,
        key: &[i64],
        values: Values,
    ) -> Result<(), TxnError> {
        let result = {
            let mut exec = self.execs[span.partition as usize].borrow_mut();
            let e = &mut *exec;
            e.fragments.entry(span.root).or_default().add(
                &self.catalog,
                &e.store,
                span.broadcast,
                table,
                key,
                values,
            )
        };
        self.mark_participant(span.root, span.partition);
        result
    }

    fn update(
        &self,
        span: &BodySpan,
        table: &str,
        key: &[i64],
        updates: Values,
    ) -> Result<(), TxnError> {
        let result = {
            let mut exec = self.execs[span.partition as usize].borrow_mut();
            let e = &mut *exec;
            e.fragments.entry(span.root).or_default().update(
                &self.catalog,
                &e.store,
                span.broadcast,
                table,
                key,
                updates,
            )
        };
        self.mark_participant(span.root, span.partition);
        result
    }

    /// Queues one invoke per call; the loop ships them all when the current
    /// event finishes, before the caller's body can resume.
    fn start_calls(&self, span: &BodySpan, calls: Vec<PendingCall>) -> Result<WaitId, TxnError> {
        for call in &calls {
            self.registry.procedure(&call.txn)?;
        }
        let mut g = self.global.borrow_mut();
        g.next_wait += 1;
        let wait = g.next_wait;
        g.waits.insert(wait, WaitGroup { slots: vec![None; calls.len()], remaining: calls.len() });
        for (index, call) in calls.into_iter().enumerate() {
            let payload_bytes = call.txn.len() + canonical_bytes(&call.args).len();
            g.outbox.push(OutMsg {
                kind: MessageKind::Invoke,
                src: span.partition,
                dst: call.target,
                root_id: span.root,
                payload_bytes,
                payload: MsgPayload::Invoke {
                    txn: call.txn,
                    args: call.args,
                    depth: span.depth + 1,
                    broadcast: span.broadcast,
                    reply: Some(ReplyTo {
                        partition: span.partition,
                        task: span.task,
                        wait,
                        index,
                    }),
                },
            });
        }
        Ok(WaitId(wait))
    }

    fn poll_calls(&self, wait: WaitId) -> Option<Vec<ProcResult>> {
        let mut g = self.global.borrow_mut();
        if g.waits.get(&wait.0)?.remaining > 0 {
            return None;
        }
        let group = g.waits.remove(&wait.0).expect("checked above");
        Some(group.slots.into_iter().map(|s| s.expect("slot filled")).collect())
    }

    fn poison(&self, span: &BodySpan, err: &TxnError) {
        let mut g = self.global.borrow_mut();
        if let Some(coord) = g.roots.get_mut(&span.root) {
            if coord.poisoned.is_none() {
                coord.poisoned = Some(err.clone());
            }
        }
    }
}

impl SimHost {
    fn mark_participant(&self, root: u64, partition: u32) {
        let mut g = self.global.borrow_mut();
        if let Some(coord) = g.roots.get_mut(&root) {
            coord.participants.insert(partition);
        }
    }
}

/// A running simulated cluster.
pub struct Cluster {
    host: Rc<SimHost>,
}

impl Cluster {
    /// Brings up the executors with empty stores and the frozen registry.
    pub fn spawn(
        cfg: ClusterConfig,
        catalog: Catalog,
        registry: Rc<ProcedureRegistry>,
    ) -> Result<Cluster, EngineError> {
        cfg.validate()?;
        let execs = (0..cfg.num_logical)
            .map(|p| {
                RefCell::new(ExecutorState {
                    store: PartitionStore::new(p, &catalog),
                    fragments: HashMap::new(),
                    pending: PendingSet::new(),
                    tasks: HashMap::new(),
                })
            })
            .collect();
        let global = GlobalState {
            now_us: 0,
            next_seq: 0,
            next_root: 0,
            next_task: 0,
            next_wait: 0,
            next_ticket: 0,
            commit_counter: 0,
            active_roots: 0,
            roots: HashMap::new(),
            waits: HashMap::new(),
            outbox: Vec::new(),
            completions: VecDeque::new(),
            resolved: HashMap::new(),
            history: HistoryLog::new(),
            metrics: MetricsCollector::new(cfg.num_logical),
            messages_by_kind: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            trace: None,
        };
        let host = Rc::new(SimHost {
            self_ref: RefCell::new(Weak::new()),
            workers: RefCell::new(vec![WorkerState::default(); cfg.num_physical as usize]),
            cfg,
            catalog,
            registry,
            execs,
            queue: RefCell::new(BinaryHeap::new()),
            global: RefCell::new(global),
        });
        *host.self_ref.borrow_mut() = Rc::downgrade(&host);
        Ok(Cluster { host })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.host.cfg
    }

    pub fn catalog(&self) -> &Catalog {
        &self.host.catalog
    }

    pub fn registry(&self) -> Rc<ProcedureRegistry> {
        self.host.registry.clone()
    }

    pub fn num_logical(&self) -> u32 {
        self.host.cfg.num_logical
    }

    /// Current simulated time in microseconds. Monotone.
    pub fn now_us(&self) -> u64 {
        self.host.global.borrow().now_us
    }

    pub fn set_trace(&self, enabled: bool) {
        let mut g = self.host.global.borrow_mut();
        g.trace = if enabled { Some(Vec::new()) } else { None };
    }

    pub fn trace_lines(&self) -> Vec<String> {
        self.host.global.borrow().trace.clone().unwrap_or_default()
    }

    /// Enqueues a root execution; the tag defaults to the ticket id.
    pub fn submit(&self, txn: &str, args: Value) -> Result<u64, EngineError> {
        let tag = self.host.global.borrow().next_ticket + 1;
        self.submit_tagged(txn, args, tag)
    }

    /// Enqueues a root execution under an explicit client-request tag;
    /// retries of one request share the tag so the metrics can separate
    /// attempt aborts from final outcomes.
    pub fn submit_tagged(&self, txn: &str, args: Value, tag: u64) -> Result<u64, EngineError> {
        let registry = &self.host.registry;
        if !registry.has_procedure(txn) {
            return Err(EngineError::UnknownProcedure(txn.to_string()));
        }
        let home = registry
            .root_partition(txn, &args, self.host.cfg.num_logical)
            .map_err(|e| EngineError::InvalidConfig(format!("submit rejected: {e}")))?;
        let mut g = self.host.global.borrow_mut();
        g.next_ticket += 1;
        let ticket = g.next_ticket;
        g.next_seq += 1;
        let seq = g.next_seq;
        let now = g.now_us;
        g.metrics.on_submit(tag, now);
        self.host.queue.borrow_mut().push(Reverse(Event {
            deliver_us: now,
            src: home,
            seq,
            dst: home,
            payload: EventPayload::Submit { ticket, tag, txn: txn.to_string(), args },
        }));
        Ok(ticket)
    }

    /// Processes events until some root resolves, returning its outcome;
    /// `None` when the cluster is quiescent.
    pub fn run_until_next_outcome(&self) -> Result<Option<RootOutcome>, EngineError> {
        loop {
            if let Some(outcome) = self.host.global.borrow_mut().completions.pop_front() {
                return Ok(Some(outcome));
            }
            if !self.host.step()? {
                return Ok(None);
            }
        }
    }

    /// Blocks (in simulated time) until the given ticket resolves.
    pub fn await_ticket(&self, ticket: u64) -> Result<RootOutcome, EngineError> {
        if let Some(out) = self.host.global.borrow_mut().resolved.remove(&ticket) {
            return Ok(out);
        }
        while let Some(out) = self.run_until_next_outcome()? {
            if out.ticket == ticket {
                return Ok(out);
            }
            self.host.global.borrow_mut().resolved.insert(out.ticket, out);
        }
        Err(EngineError::InvalidConfig(format!(
            "ticket {ticket} never resolved (was it submitted?)"
        )))
    }

    /// Drains all outstanding work and returns the metrics report.
    pub fn run_until_quiescent(&self) -> Result<MetricsReport, EngineError> {
        while self.host.step()? {}
        let g = self.host.global.borrow();
        assert_eq!(g.active_roots, 0, "quiescent cluster has no active roots");
        for (p, exec) in self.host.execs.iter().enumerate() {
            let e = exec.borrow();
            assert!(e.tasks.is_empty(), "partition {p} has suspended tasks at quiescence");
            assert!(e.fragments.is_empty(), "partition {p} has live fragments at quiescence");
            assert!(e.pending.is_empty(), "partition {p} has parked fragments at quiescence");
        }
        drop(g);
        Ok(self.metrics_snapshot())
    }

    /// Current metrics without requiring quiescence (used by probes).
    pub fn metrics_snapshot(&self) -> MetricsReport {
        let g = self.host.global.borrow();
        let workers = self.host.workers.borrow();
        let busy: Vec<u64> = workers.iter().map(|w| w.busy_us).collect();
        g.metrics.report(g.now_us, &busy)
    }

    /// Messages sent so far, by kind.
    pub fn messages_by_kind(&self) -> BTreeMap<String, u64> {
        self.host.global.borrow().messages_by_kind.clone()
    }

    /// Zeroes counters and timings-by-tag; the simulated clock keeps running.
    /// Benchmarks call this after loading so the report covers steady state.
    pub fn reset_metrics(&self) {
        let mut g = self.host.global.borrow_mut();
        g.metrics.reset();
        g.messages_by_kind.clear();
        let mut workers = self.host.workers.borrow_mut();
        for w in workers.iter_mut() {
            w.busy_us = 0;
        }
    }

    fn ensure_quiescent(&self) -> Result<(), EngineError> {
        let g = self.host.global.borrow();
        let in_flight = g.active_roots + self.host.queue.borrow().len();
        if in_flight > 0 {
            return Err(EngineError::InFlight(in_flight));
        }
        Ok(())
    }

    /// Order-independent digest of one partition's committed state.
    pub fn state_digest(
        &self,
        partition: u32,
        include_replicated: bool,
    ) -> Result<[u8; 32], EngineError> {
        self.ensure_quiescent()?;
        let exec = self.host.execs[partition as usize].borrow();
        Ok(exec.store.digest(&self.host.catalog, include_replicated))
    }

    pub fn digests(&self, include_replicated: bool) -> Result<Vec<[u8; 32]>, EngineError> {
        (0..self.host.cfg.num_logical)
            .map(|p| self.state_digest(p, include_replicated))
            .collect()
    }

    /// Digest over the union of all partitions' records; invariant under the
    /// logical-to-physical mapping and under the partition count.
    pub fn cluster_digest(&self, include_replicated: bool) -> Result<[u8; 32], EngineError> {
        self.ensure_quiescent()?;
        let guards: Vec<_> = self.host.execs.iter().map(|e| e.borrow()).collect();
        let stores: Vec<&PartitionStore> = guards.iter().map(|e| &e.store).collect();
        Ok(combined_digest(&stores, &self.host.catalog, include_replicated))
    }

    /// Copies of all partition stores (for the replay oracle's initial state).
    pub fn stores_snapshot(&self) -> Result<Vec<PartitionStore>, EngineError> {
        self.ensure_quiescent()?;
        Ok(self.host.execs.iter().map(|e| e.borrow().store.clone()).collect())
    }

    pub fn history(&self) -> HistoryLog {
        self.host.global.borrow().history.clone()
    }

    pub fn history_len(&self) -> usize {
        self.host.global.borrow().history.len()
    }

    /// Measured workload profile: committed transaction rate per logical
    /// partition and the symmetric message matrix, both per simulated
    /// second. Feed to the placement advisor.
    pub fn traffic_profile(&self) -> crate::placement::WorkloadProfile {
        let g = self.host.global.borrow();
        let n = self.host.cfg.num_logical as usize;
        let secs = g.now_us as f64 / 1e6;
        let rate = |count: u64| if secs > 0.0 { count as f64 / secs } else { 0.0 };
        let load = g.metrics.committed_by_home.iter().map(|&c| rate(c)).collect();
        let mut traffic = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    traffic[i][j] = rate(g.metrics.traffic[i][j] + g.metrics.traffic[j][i]);
                }
            }
        }
        crate::placement::WorkloadProfile { load, traffic }
    }

    /// Direct read access to a partition's committed store, for audits.
    pub fn with_store<T>(&self, partition: u32, f: impl FnOnce(&PartitionStore) -> T) -> T {
        f(&self.host.execs[partition as usize].borrow().store)
    }
}

impl SimHost {
    /// Processes one event. Returns false when the queue is empty.
    fn step(&self) -> Result<bool, EngineError> {
        let ev = match self.queue.borrow_mut().pop() {
            Some(Reverse(ev)) => ev,
            None => return Ok(false),
        };
        if ev.deliver_us > self.cfg.max_sim_time_us {
            return Err(EngineError::Livelock { cap_us: self.cfg.max_sim_time_us });
        }
        let worker = self.cfg.mapping[ev.dst as usize] as usize;
        let end = {
            let mut workers = self.workers.borrow_mut();
            let w = &mut workers[worker];
            let start = ev.deliver_us.max(w.busy_until_us);
            let end = start + self.cfg.exec_cost_us;
            w.busy_until_us = end;
            w.busy_us += self.cfg.exec_cost_us;
            end
        };
        {
            let mut g = self.global.borrow_mut();
            if end > g.now_us {
                g.now_us = end;
            }
        }
        self.dispatch(ev, end);
        self.flush_outbox(end);
        Ok(true)
    }

    fn dispatch(&self, ev: Event, now: u64) {
        match ev.payload {
            EventPayload::Submit { ticket, tag, txn, args } => {
                self.start_root(ev.dst, ticket, tag, txn, args, now)
            }
            EventPayload::Message { root_id, payload, .. } => match payload {
                MsgPayload::Invoke { txn, args, depth, broadcast, reply } => {
                    self.on_invoke(ev.dst, ev.src, root_id, txn, args, depth, broadcast, reply, now)
                }
                MsgPayload::ResultMsg { reply, result } => {
                    self.on_result(ev.dst, reply, result, now)
                }
                MsgPayload::BroadcastDone { result } => {
                    self.on_broadcast_piece(root_id, result, now)
                }
                MsgPayload::Validate => self.on_validate(ev.dst, ev.src, root_id, now),
                MsgPayload::Vote { verdict } => self.record_vote(root_id, ev.src, verdict, now),
                MsgPayload::Decide { decision } => self.apply_decide(ev.dst, root_id, decision),
            },
        }
    }

    fn start_root(&self, home: u32, ticket: u64, tag: u64, txn: String, args: Value, now: u64) {
        let proc = self.registry.procedure(&txn).expect("validated at submit");
        let is_broadcast = proc.broadcast;
        let body = proc.body.clone();
        let (root_id, task_id) = {
            let mut g = self.global.borrow_mut();
            g.next_root += 1;
            g.next_task += 1;
            let (root_id, task_id) = (g.next_root, g.next_task);
            g.active_roots += 1;
            g.roots.insert(
                root_id,
                RootCoord {
                    tag,
                    ticket,
                    txn: txn.clone(),
                    args: args.clone(),
                    home,
                    submit_us: now,
                    broadcast: is_broadcast,
                    outstanding_pieces: if is_broadcast { self.cfg.num_logical - 1 } else { 0 },
                    body_done: false,
                    body_end_us: 0,
                    body_value: None,
                    poisoned: None,
                    participants: BTreeSet::new(),
                    votes: BTreeMap::new(),
                    awaiting_votes: false,
                },
            );
            if is_broadcast {
                let payload_bytes = txn.len() + canonical_bytes(&args).len();
                for p in 0..self.cfg.num_logical {
                    if p != home {
                        g.outbox.push(OutMsg {
                            kind: MessageKind::Broadcast,
                            src: home,
                            dst: p,
                            root_id,
                            payload_bytes,
                            payload: MsgPayload::Invoke {
                                txn: txn.clone(),
                                args: args.clone(),
                                depth: 0,
                                broadcast: true,
                                reply: None,
                            },
                        });
                    }
                }
            }
            (root_id, task_id)
        };
        let span = BodySpan {
            root: root_id,
            task: task_id,
            partition: home,
            depth: 0,
            broadcast: is_broadcast,
        };
        let ctx = ProcCtx::new(self.rc() as Rc<dyn TxnHost>, span);
        let future = body(ctx, args);
        self.execs[home as usize]
            .borrow_mut()
            .tasks
            .insert(task_id, TaskEntry { future, kind: TaskKind::RootBody { root: root_id } });
        self.poll_task(home, task_id, now);
    }

    #[allow(clippy::too_many_arguments)]
    fn on_invoke(
        &self,
        target: u32,
        src: u32,
        root_id: u64,
        txn: String,
        args: Value,
        depth: u32,
        broadcast: bool,
        reply: Option<ReplyTo>,
        now: u64,
    ) {
        let body = self.registry.procedure(&txn).expect("checked at start_calls").body.clone();
        let task_id = {
            let mut g = self.global.borrow_mut();
            g.next_task += 1;
            g.next_task
        };
        let kind = match reply {
            Some(reply) => TaskKind::ChildBody { root: root_id, reply },
            None => TaskKind::BroadcastBody { root: root_id, home: src },
        };
        let span = BodySpan { root: root_id, task: task_id, partition: target, depth, broadcast };
        let ctx = ProcCtx::new(self.rc() as Rc<dyn TxnHost>, span);
        let future = body(ctx, args);
        self.execs[target as usize]
            .borrow_mut()
            .tasks
            .insert(task_id, TaskEntry { future, kind });
        self.poll_task(target, task_id, now);
    }

    /// Takes a task out, polls it once, and handles completion. No RefCell
    /// borrow is held while the body runs.
    fn poll_task(&self, partition: u32, task: u64, now: u64) {
        let entry = self.execs[partition as usize].borrow_mut().tasks.remove(&task);
        let Some(mut entry) = entry else { return };
        match poll_body(&mut entry.future) {
            Poll::Pending => {
                self.execs[partition as usize].borrow_mut().tasks.insert(task, entry);
            }
            Poll::Ready(result) => match entry.kind {
                TaskKind::RootBody { root } => self.on_root_body_done(root, result, now),
                TaskKind::ChildBody { root, reply } => {
                    let payload_bytes = match &result {
                        Ok(v) => canonical_bytes(v).len(),
                        Err(e) => e.to_string().len(),
                    };
                    self.global.borrow_mut().outbox.push(OutMsg {
                        kind: MessageKind::Result,
                        src: partition,
                        dst: reply.partition,
                        root_id: root,
                        payload_bytes,
                        payload: MsgPayload::ResultMsg { reply, result },
                    });
                }
                TaskKind::BroadcastBody { root, home } => {
                    let payload_bytes = match &result {
                        Ok(v) => canonical_bytes(v).len(),
                        Err(e) => e.to_string().len(),
                    };
                    self.global.borrow_mut().outbox.push(OutMsg {
                        kind: MessageKind::Result,
                        src: partition,
                        dst: home,
                        root_id: root,
                        payload_bytes,
                        payload: MsgPayload::BroadcastDone { result },
                    });
                }
            },
        }
    }

    fn on_result(&self, partition: u32, reply: ReplyTo, result: ProcResult, now: u64) {
        let ready = {
            let mut g = self.global.borrow_mut();
            match g.waits.get_mut(&reply.wait) {
                Some(group) => {
                    debug_assert!(group.slots[reply.index].is_none());
                    group.slots[reply.index] = Some(result);
                    group.remaining -= 1;
                    group.remaining == 0
                }
                None => false,
            }
        };
        if ready {
            self.poll_task(partition, reply.task, now);
        }
    }

    fn on_root_body_done(&self, root: u64, result: ProcResult, now: u64) {
        let proceed = {
            let mut g = self.global.borrow_mut();
            let coord = g.roots.get_mut(&root).expect("root live");
            coord.body_done = true;
            coord.body_end_us = now;
            match result {
                Ok(v) => coord.body_value = Some(v),
                Err(e) => {
                    if coord.poisoned.is_none() {
                        coord.poisoned = Some(e);
                    }
                }
            }
            coord.outstanding_pieces == 0
        };
        if proceed {
            self.finish_body_phase(root, now);
        }
    }

    fn on_broadcast_piece(&self, root: u64, result: ProcResult, now: u64) {
        let proceed = {
            let mut g = self.global.borrow_mut();
            let coord = g.roots.get_mut(&root).expect("root live");
            coord.outstanding_pieces -= 1;
            if let Err(e) = result {
                if coord.poisoned.is_none() {
                    coord.poisoned = Some(e);
                }
            }
            coord.outstanding_pieces == 0 && coord.body_done
        };
        if proceed {
            self.finish_body_phase(root, now);
        }
    }

    /// Body (and broadcast pieces) are done: either abort on a user error or
    /// start the vote round. The root's own fragment validates in place.
    fn finish_body_phase(&self, root: u64, now: u64) {
        let (home, poisoned, participants) = {
            let mut g = self.global.borrow_mut();
            let coord = g.roots.get_mut(&root).expect("root live");
            coord.awaiting_votes = true;
            (coord.home, coord.poisoned.clone(), coord.participants.clone())
        };
        if let Some(err) = poisoned {
            self.decide_root(root, Some((AbortReason::UserError, err.to_string())), now);
            return;
        }
        if participants.is_empty() {
            self.decide_root(root, None, now);
            return;
        }
        let mut home_verdict = None;
        for &p in &participants {
            if p == home {
                home_verdict = Some(self.validate_at(p, root, now));
            } else {
                self.global.borrow_mut().outbox.push(OutMsg {
                    kind: MessageKind::Validate,
                    src: home,
                    dst: p,
                    root_id: root,
                    payload_bytes: 0,
                    payload: MsgPayload::Validate,
                });
            }
        }
        match home_verdict {
            Some(v) => self.record_vote(root, home, v, now),
            None => self.maybe_decide(root, now),
        }
    }

    /// Backward validation of the root's fragment on this partition; a Valid
    /// verdict parks the fragment in the pending queue.
    fn validate_at(&self, partition: u32, root: u64, now: u64) -> Verdict {
        let mut exec = self.execs[partition as usize].borrow_mut();
        let e = &mut *exec;
        let frag = e.fragments.get(&root).expect("participant holds a fragment");
        let parked = occ::parked_fragments(&e.pending, &e.fragments, root);
        match occ::validate_fragment(frag, &e.store, &parked) {
            Ok(()) => {
                let vote_seq = e.pending.park(root, now);
                Verdict::Valid { vote_seq }
            }
            Err((class, table, key)) => Verdict::Conflict { class, table, key },
        }
    }

    fn on_validate(&self, partition: u32, home: u32, root: u64, now: u64) {
        let verdict = self.validate_at(partition, root, now);
        self.global.borrow_mut().outbox.push(OutMsg {
            kind: MessageKind::Vote,
            src: partition,
            dst: home,
            root_id: root,
            payload_bytes: 0,
            payload: MsgPayload::Vote { verdict },
        });
    }

    fn record_vote(&self, root: u64, partition: u32, verdict: Verdict, now: u64) {
        {
            let mut g = self.global.borrow_mut();
            let Some(coord) = g.roots.get_mut(&root) else { return };
            coord.votes.insert(partition, verdict);
        }
        self.maybe_decide(root, now);
    }

    fn maybe_decide(&self, root: u64, now: u64) {
        let abort = {
            let g = self.global.borrow();
            let Some(coord) = g.roots.get(&root) else { return };
            if coord.votes.len() < coord.participants.len() {
                return;
            }
            coord.votes.iter().find_map(|(p, v)| match v {
                Verdict::Conflict { class, table, key } => {
                    let reason = match class {
                        occ::ConflictClass::StaleRead => AbortReason::ValidationConflict,
                        occ::ConflictClass::PendingOverlap => AbortReason::PendingOverlap,
                    };
                    Some((reason, format!("conflict on {table} {key:?} at partition {p}")))
                }
                Verdict::Valid { .. } => None,
            })
        };
        self.decide_root(root, abort, now);
    }

    /// The decision: sample the cluster commit counter, append the history
    /// record, notify participants, resolve the ticket.
    fn decide_root(&self, root: u64, abort: Option<(AbortReason, String)>, now: u64) {
        let commit = abort.is_none();
        let (coord, global_index) = {
            let mut g = self.global.borrow_mut();
            g.commit_counter += 1;
            let idx = g.commit_counter;
            let coord = g.roots.remove(&root).expect("root live");
            g.active_roots -= 1;
            (coord, idx)
        };
        let decision = Decision { commit, global_index, sample_time_us: now };

        let mut participant_records = Vec::new();
        for &p in &coord.participants {
            let (reads, writes) = {
                let exec = self.execs[p as usize].borrow();
                match exec.fragments.get(&root) {
                    Some(f) => (f.read_summary(), f.write_summary()),
                    None => (Vec::new(), Vec::new()),
                }
            };
            let vote_seq = match coord.votes.get(&p) {
                Some(Verdict::Valid { vote_seq }) => Some(*vote_seq),
                _ => None,
            };
            participant_records.push(ParticipantRecord {
                partition: p,
                vote_seq,
                apply_seq: None,
                reads,
                writes,
            });
        }

        let value = coord.body_value.clone().unwrap_or(Value::Null);
        let outcome_rec = match &abort {
            None => RecordedOutcome::Committed { value: value.clone() },
            Some((reason, error)) => {
                RecordedOutcome::Aborted { reason: *reason, error: error.clone() }
            }
        };
        {
            let mut g = self.global.borrow_mut();
            g.history.append(HistoryRecord {
                global_index,
                root_id: root,
                tag: coord.tag,
                txn: coord.txn.clone(),
                args: coord.args.clone(),
                outcome: outcome_rec,
                participants: participant_records,
                submit_us: coord.submit_us,
                decide_us: now,
            });
        }

        for &p in &coord.participants {
            if p == coord.home {
                self.apply_decide(p, root, decision);
            } else {
                self.global.borrow_mut().outbox.push(OutMsg {
                    kind: MessageKind::Decide,
                    src: coord.home,
                    dst: p,
                    root_id: root,
                    payload_bytes: 0,
                    payload: MsgPayload::Decide { decision },
                });
            }
        }

        let outcome = match abort {
            None => TxnOutcome::Committed { value, global_index },
            Some((reason, error)) => TxnOutcome::Aborted { reason, error },
        };
        let mut g = self.global.borrow_mut();
        match &outcome {
            TxnOutcome::Committed { .. } => g.metrics.on_commit(coord.tag, coord.home, now),
            TxnOutcome::Aborted { reason, .. } => g.metrics.on_abort(coord.tag, *reason),
        }
        g.completions.push_back(RootOutcome {
            ticket: coord.ticket,
            tag: coord.tag,
            root_id: root,
            txn: coord.txn,
            outcome,
            submit_us: coord.submit_us,
            body_end_us: coord.body_end_us,
            decide_us: now,
        });
    }

    /// Participant-side decision handling: discard on abort, otherwise mark
    /// decided and apply every released fragment in global-index order.
    fn apply_decide(&self, partition: u32, root: u64, decision: Decision) {
        let applied = {
            let mut exec = self.execs[partition as usize].borrow_mut();
            let e = &mut *exec;
            e.pending.record_decision(root, decision);
            if !decision.commit {
                e.fragments.remove(&root);
            }
            let mut applied = Vec::new();
            while let Some((r, _, apply_seq)) = e.pending.pop_applicable() {
                let frag = e.fragments.remove(&r).expect("parked fragment exists");
                frag.apply(&mut e.store);
                applied.push((r, apply_seq));
            }
            applied
        };
        if !applied.is_empty() {
            let mut g = self.global.borrow_mut();
            for (r, apply_seq) in applied {
                g.history.note_applied(r, partition, apply_seq);
            }
        }
    }

    /// Stamps and enqueues everything the last dispatch produced. All sends
    /// happen at the event's completion time, so a body that fanned out
    /// ships every invoke before it can resume.
    fn flush_outbox(&self, send_us: u64) {
        let msgs: Vec<OutMsg> = {
            let mut g = self.global.borrow_mut();
            if g.outbox.is_empty() {
                return;
            }
            g.outbox.drain(..).collect()
        };
        for m in msgs {
            let latency = self.link_latency_us(m.src, m.dst);
            let deliver = send_us + latency;
            let seq = {
                let mut g = self.global.borrow_mut();
                g.metrics.on_message(m.src, m.dst, matches!(m.kind, MessageKind::Invoke));
                *g.messages_by_kind.entry(m.kind.to_string()).or_insert(0) += 1;
                if let Some(trace) = &mut g.trace {
                    trace.push(format!(
                        "{} {} {} {} {} {} {}",
                        m.kind, m.src, m.dst, send_us, deliver, m.root_id, m.payload_bytes
                    ));
                }
                g.next_seq += 1;
                g.next_seq
            };
            self.queue.borrow_mut().push(Reverse(Event {
                deliver_us: deliver,
                src: m.src,
                seq,
                dst: m.dst,
                payload: EventPayload::Message { kind: m.kind, root_id: m.root_id, payload: m.payload },
            }));
        }
    }

    /// One-way delivery latency: zero between co-located logical partitions,
    /// otherwise the configured latency with optional seeded jitter.
    fn link_latency_us(&self, src: u32, dst: u32) -> u64 {
        if self.cfg.mapping[src as usize] == self.cfg.mapping[dst as usize] {
            return 0;
        }
        let base = self.cfg.net_latency_us;
        if base == 0 || self.cfg.latency_jitter == 0.0 {
            return base;
        }
        let mut g = self.global.borrow_mut();
        let u: f64 = g.rng.gen_range(-1.0..=1.0);
        let jittered = base as f64 * (1.0 + self.cfg.latency_jitter * u);
        jittered.round().max(0.0) as u64
    }
}
