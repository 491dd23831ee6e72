//! The programming model: named procedures bound to logical partitions via
//! pure partition mappers, registered identically on every partition before
//! the cluster starts.
//!
//! Procedure bodies are async closures. A body runs single-threaded on its
//! owning partition executor; the only suspension points are subtransaction
//! invocations (`exec_sub`, `parallel_exec`), which gives the blocking
//! `EXEC ... ON PARTITION` semantics while the discrete-event simulator
//! stays deterministic.

mod ctx;

pub use ctx::{PendingCall, ProcCtx, TxnHost, WaitId};

use crate::error::{EngineError, TxnError};
use crate::value::Value;
use std::collections::BTreeMap;
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;

pub type ProcResult = Result<Value, TxnError>;
pub type BodyFuture = Pin<Box<dyn Future<Output = ProcResult>>>;
pub type ProcFn = Rc<dyn Fn(ProcCtx, Value) -> BodyFuture>;
pub type MapperFn = Rc<dyn Fn(&Value) -> Result<i64, TxnError>>;

/// A registered transaction class.
pub struct Procedure {
    pub name: String,
    /// Mapper used by `exec_root`; `None` for broadcast procedures, which
    /// run once on every partition.
    pub mapper: Option<String>,
    pub body: ProcFn,
    pub broadcast: bool,
}

/// Named procedures and partition mappers, frozen before the cluster starts.
#[derive(Default)]
pub struct ProcedureRegistry {
    mappers: BTreeMap<String, MapperFn>,
    procedures: BTreeMap<String, Procedure>,
}

impl ProcedureRegistry {
    pub fn new() -> ProcedureRegistry {
        ProcedureRegistry::default()
    }

    /// Registers a pure mapping function from call arguments to a logical
    /// partition id. Range checking happens at invocation time, when the
    /// cluster size is known.
    pub fn register_mapper<F>(&mut self, name: &str, f: F) -> Result<(), EngineError>
    where
        F: Fn(&Value) -> Result<i64, TxnError> + 'static,
    {
        if self.mappers.contains_key(name) {
            return Err(EngineError::DuplicateMapper(name.to_string()));
        }
        self.mappers.insert(name.to_string(), Rc::new(f));
        Ok(())
    }

    pub fn register_procedure<F, Fut>(
        &mut self,
        name: &str,
        mapper: &str,
        body: F,
    ) -> Result<(), EngineError>
    where
        F: Fn(ProcCtx, Value) -> Fut + 'static,
        Fut: Future<Output = ProcResult> + 'static,
    {
        if self.procedures.contains_key(name) {
            return Err(EngineError::DuplicateProcedure(name.to_string()));
        }
        if !self.mappers.contains_key(mapper) {
            return Err(EngineError::UnknownMapper(
                name.to_string(),
                mapper.to_string(),
            ));
        }
        let body: ProcFn = Rc::new(move |ctx, args| Box::pin(body(ctx, args)));
        self.procedures.insert(
            name.to_string(),
            Procedure {
                name: name.to_string(),
                mapper: Some(mapper.to_string()),
                body,
                broadcast: false,
            },
        );
        Ok(())
    }

    /// Registers a broadcast transaction: the runtime executes the body once
    /// per logical partition with identical arguments inside one root
    /// commit. The only transactions allowed to write replicated tables.
    pub fn register_broadcast<F, Fut>(&mut self, name: &str, body: F) -> Result<(), EngineError>
    where
        F: Fn(ProcCtx, Value) -> Fut + 'static,
        Fut: Future<Output = ProcResult> + 'static,
    {
        if self.procedures.contains_key(name) {
            return Err(EngineError::DuplicateProcedure(name.to_string()));
        }
        let body: ProcFn = Rc::new(move |ctx, args| Box::pin(body(ctx, args)));
        self.procedures.insert(
            name.to_string(),
            Procedure {
                name: name.to_string(),
                mapper: None,
                body,
                broadcast: true,
            },
        );
        Ok(())
    }

    pub fn procedure(&self, name: &str) -> Result<&Procedure, TxnError> {
        self.procedures
            .get(name)
            .ok_or_else(|| TxnError::UnknownProcedureName(name.to_string()))
    }

    pub fn has_procedure(&self, name: &str) -> bool {
        self.procedures.contains_key(name)
    }

    /// Pure evaluation of a mapper, with the invocation-time range check.
    pub fn map_partition(
        &self,
        mapper: &str,
        args: &Value,
        num_logical: u32,
    ) -> Result<u32, TxnError> {
        let f = self
            .mappers
            .get(mapper)
            .ok_or_else(|| TxnError::UnknownMapperName(mapper.to_string()))?;
        let id = f(args)?;
        if id < 0 || id >= num_logical as i64 {
            return Err(TxnError::MapperRange(mapper.to_string(), id, num_logical));
        }
        Ok(id as u32)
    }

    /// Partition a root invocation of `name` with `args` runs on.
    pub fn root_partition(
        &self,
        name: &str,
        args: &Value,
        num_logical: u32,
    ) -> Result<u32, TxnError> {
        let proc = self.procedure(name)?;
        match &proc.mapper {
            Some(m) => self.map_partition(m, args, num_logical),
            None => Ok(0), // broadcast roots coordinate from partition 0
        }
    }
}

/// Extracts a required integer field from JSON arguments. Mappers and
/// procedure bodies use this for argument decoding.
pub fn int_field(args: &Value, field: &str) -> Result<i64, TxnError> {
    args.get(field)
        .and_then(Value::as_i64)
        .ok_or_else(|| TxnError::BadArgs(format!("missing integer field {field:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn identity_mapper_maps_literally() {
        let mut reg = ProcedureRegistry::new();
        reg.register_mapper("map", |args| int_field(args, "w_id")).unwrap();
        assert_eq!(reg.map_partition("map", &json!({"w_id": 3}), 8).unwrap(), 3);
        assert_eq!(reg.map_partition("map", &json!({"w_id": 0}), 8).unwrap(), 0);
    }

    #[test]
    fn duplicate_and_unknown_registrations() {
        let mut reg = ProcedureRegistry::new();
        reg.register_mapper("map", |args| int_field(args, "w_id")).unwrap();
        let err = reg.register_mapper("map", |_| Ok(0)).unwrap_err();
        assert_eq!(err, EngineError::DuplicateMapper("map".into()));

        reg.register_procedure("noop", "map", |_ctx, _args| async { Ok(Value::Null) })
            .unwrap();
        let err = reg
            .register_procedure("noop", "map", |_ctx, _args| async { Ok(Value::Null) })
            .unwrap_err();
        assert_eq!(err, EngineError::DuplicateProcedure("noop".into()));
        let err = reg
            .register_procedure("other", "nope", |_ctx, _args| async { Ok(Value::Null) })
            .unwrap_err();
        assert_eq!(err, EngineError::UnknownMapper("other".into(), "nope".into()));
    }

    #[test]
    fn mapper_range_checked_at_invocation() {
        let mut reg = ProcedureRegistry::new();
        reg.register_mapper("map", |args| int_field(args, "w_id")).unwrap();
        let err = reg.map_partition("map", &json!({"w_id": 9}), 4).unwrap_err();
        assert!(matches!(err, TxnError::MapperRange(_, 9, 4)));
        let err = reg.map_partition("nope", &json!({}), 4).unwrap_err();
        assert!(matches!(err, TxnError::UnknownMapperName(_)));
    }
}
