//! The invoker: per-object serialization, task construction, completion
//! application and exactly-once async processing.
//!
//! A mutation runs as
//!
//! 1. lock the object (FIFO, local to its owner),
//! 2. snapshot its record and build a self-contained task,
//! 3. run the task on the engine; the function uploads files under fresh
//!    version ids,
//! 4. commit doc and version ids in one compare-and-set.
//!
//! Nothing is visible until step 4, so a failure anywhere earlier leaves the
//! object as it was and uploaded files become orphans for gc.
//!
//! Async invocations go through the message log. The commit of an async
//! invocation also records the entry's offset in the object, and is written
//! through to the store before the entry is acknowledged. A redelivered entry
//! whose offset is already recorded is skipped.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use dashmap::DashMap;
use futures::future::BoxFuture;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dataflow::{self, StepState};
use crate::engine::EngineAdapter;
use crate::fault::{FaultCtx, FaultInjector, FaultPoint};
use crate::grid::{GridError, GridNode};
use crate::ids::{InvocationId, InvokerId, ObjectId};
use crate::lock::{LockError, LockTable, Ticket, DEFAULT_LOCK_TIMEOUT};
use crate::log::MessageLog;
use crate::protocol::{build_task, TaskSpec};
use crate::record::{ObjectRecord, PartitionId};
use crate::registry::{check_access, AccessDecision, Access, BuiltinId, CallerContext, FunctionKind, Registry, RegistryError, ResolvedBinding, ResolvedClass};
use crate::storage::Gateway;

pub const DEFAULT_TASK_TIMEOUT_SECS: u64 = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    #[default]
    Sync,
    Async,
}

/// A function call on an object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvocationEnvelope {
    pub invocation_id: InvocationId,
    pub target_object_id: ObjectId,
    pub binding_name: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub input_refs: Vec<ObjectId>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition_id: Option<PartitionId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    /// Class of the target when it does not exist yet (for `new`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ref: Option<String>,
    /// Where an output object goes; defaults to `{invocationId}-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_object_id: Option<ObjectId>,
    /// Only create the output object; leave the target untouched.
    #[serde(default)]
    pub immutable: bool,
    #[serde(default)]
    pub caller: CallerContext,
}

impl InvocationEnvelope {
    pub fn new(target: ObjectId, binding: impl Into<String>) -> Self {
        Self {
            invocation_id: InvocationId::random(),
            target_object_id: target,
            binding_name: binding.into(),
            args: BTreeMap::new(),
            input_refs: Vec::new(),
            mode: Mode::Sync,
            partition_id: None,
            offset: None,
            class_ref: None,
            output_object_id: None,
            immutable: false,
            caller: CallerContext::external(),
        }
    }

    pub fn with_id(mut self, id: InvocationId) -> Self {
        self.invocation_id = id;
        self
    }

    pub fn with_class(mut self, class: impl Into<String>) -> Self {
        self.class_ref = Some(class.into());
        self
    }

    pub fn with_arg(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.args.insert(k.into(), v.into());
        self
    }

    pub fn with_args(mut self, args: BTreeMap<String, String>) -> Self {
        self.args = args;
        self
    }

    fn output_id(&self) -> ObjectId {
        self.output_object_id
            .clone()
            .unwrap_or_else(|| ObjectId::new(format!("{}-out", self.invocation_id)).expect("derived id is valid"))
    }

    fn fault_ctx(&self, invoker: u32) -> FaultCtx<'_> {
        FaultCtx {
            invoker: Some(invoker),
            invocation: Some(self.invocation_id.as_str()),
            object: Some(self.target_object_id.as_str()),
            binding: Some(&self.binding_name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum InvocationStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvocationResult {
    pub invocation_id: InvocationId,
    pub status: InvocationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_revision: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_object_id: Option<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_doc: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Per-step states of a dataflow run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<BTreeMap<String, StepState>>,
    /// The work had already been done; nothing was executed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skipped: bool,
    /// Invoker that executed the call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub served_by: Option<InvokerId>,
}

impl InvocationResult {
    pub fn pending(id: InvocationId) -> Self {
        Self {
            invocation_id: id,
            status: InvocationStatus::Pending,
            new_revision: None,
            output_object_id: None,
            return_doc: None,
            error: None,
            steps: None,
            skipped: false,
            served_by: None,
        }
    }

    pub fn done(id: InvocationId) -> Self {
        Self {
            status: InvocationStatus::Done,
            ..Self::pending(id)
        }
    }

    pub fn failed(id: InvocationId, error: impl Into<String>) -> Self {
        Self {
            status: InvocationStatus::Failed,
            error: Some(error.into()),
            ..Self::pending(id)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "camelCase")]
pub enum InvokeError {
    #[error("access denied ({rule}): {reason}")]
    AccessDenied { rule: Access, reason: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("not the owner; owner is {owner}")]
    NotOwner { owner: InvokerId },
    #[error("object {0} already exists")]
    AlreadyExists(ObjectId),
    #[error("invalid invocation: {0}")]
    Invalid(String),
    #[error("function failed: {0}")]
    FunctionFailed(String),
    #[error("engine failure: {0}")]
    EngineFailure(String),
    #[error("lock: {0}")]
    Lock(String),
    #[error("invoker crashed at {0}")]
    Crashed(String),
    #[error("grid: {0}")]
    Grid(String),
    #[error("message log: {0}")]
    Log(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("dataflow step {step} failed: {cause}")]
    StepFailed { step: String, cause: String },
    #[error("owner {0} unreachable")]
    Unreachable(String),
}

impl InvokeError {
    /// Infrastructure errors leave an async entry unacknowledged for replay;
    /// every other outcome is final.
    pub fn is_infra(&self) -> bool {
        matches!(
            self,
            InvokeError::NotOwner { .. }
                | InvokeError::EngineFailure(_)
                | InvokeError::Lock(_)
                | InvokeError::Crashed(_)
                | InvokeError::Grid(_)
                | InvokeError::Log(_)
                | InvokeError::Storage(_)
                | InvokeError::Unreachable(_)
        )
    }
}

impl From<GridError> for InvokeError {
    fn from(e: GridError) -> Self {
        match e {
            GridError::NotFound(id) => InvokeError::NotFound(format!("object {id}")),
            GridError::NotOwner { owner } => InvokeError::NotOwner { owner },
            GridError::OwnerUnreachable(o) => InvokeError::Unreachable(o.to_string()),
            other => InvokeError::Grid(other.to_string()),
        }
    }
}

impl From<LockError> for InvokeError {
    fn from(e: LockError) -> Self {
        InvokeError::Lock(e.to_string())
    }
}

impl From<RegistryError> for InvokeError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::NotFound(c) => InvokeError::NotFound(format!("class {c}")),
            other => InvokeError::Invalid(other.to_string()),
        }
    }
}

/// Outcome of every invocation by id, shared by the cluster.
#[derive(Default)]
pub struct ResultStore {
    results: DashMap<InvocationId, InvocationResult>,
}

impl ResultStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &InvocationId) -> Option<InvocationResult> {
        self.results.get(id).map(|r| r.clone())
    }

    pub fn set(&self, r: InvocationResult) {
        self.results.insert(r.invocation_id.clone(), r);
    }

    /// Records a pending entry unless an outcome is already known.
    pub fn set_pending(&self, id: &InvocationId) {
        self.results
            .entry(id.clone())
            .or_insert_with(|| InvocationResult::pending(id.clone()));
    }

    pub fn len(&self) -> usize {
        self.results.len()
    }

    pub fn is_empty(&self) -> bool {
        self.results.is_empty()
    }
}

/// Sends an envelope to another invoker.
#[async_trait]
pub trait InvokerRouter: Send + Sync {
    async fn route(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationResult, InvokeError>;

    /// Hands an async invocation to `to` for appending to the log.
    async fn submit(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationId, InvokeError>;
}

/// In-process router over live invokers.
#[derive(Default)]
pub struct LocalRouter {
    invokers: RwLock<HashMap<InvokerId, Arc<Invoker>>>,
}

impl LocalRouter {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, inv: &Arc<Invoker>) {
        self.invokers.write().insert(inv.id().clone(), inv.clone());
    }

    pub fn remove(&self, id: &InvokerId) {
        self.invokers.write().remove(id);
    }

    pub fn get(&self, id: &InvokerId) -> Result<Arc<Invoker>, InvokeError> {
        self.invokers
            .read()
            .get(id)
            .cloned()
            .ok_or_else(|| InvokeError::Unreachable(id.to_string()))
    }
}

#[async_trait]
impl InvokerRouter for LocalRouter {
    async fn route(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationResult, InvokeError> {
        let inv = self.get(to)?;
        inv.invoke_sync(env).await
    }

    async fn submit(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationId, InvokeError> {
        let inv = self.get(to)?;
        inv.invoke_async(env).await
    }
}

#[derive(Debug, Clone)]
pub struct InvokerConfig {
    /// Position in the cluster; `CRASH_INVOKER(i)` targets it.
    pub index: u32,
    pub lock_timeout: Duration,
    pub task_timeout_secs: u64,
    pub poll_batch: usize,
    /// Intra-layer concurrency of dataflow runs.
    pub dataflow_concurrency: usize,
}

impl Default for InvokerConfig {
    fn default() -> Self {
        Self {
            index: 0,
            lock_timeout: DEFAULT_LOCK_TIMEOUT,
            task_timeout_secs: DEFAULT_TASK_TIMEOUT_SECS,
            poll_batch: 64,
            dataflow_concurrency: dataflow::DEFAULT_LAYER_CONCURRENCY,
        }
    }
}

/// Shared services an invoker runs against.
#[derive(Clone)]
pub struct InvokerDeps {
    pub registry: Arc<Registry>,
    pub engine: Arc<EngineAdapter>,
    pub gateway: Arc<Gateway>,
    pub log: Arc<MessageLog>,
    pub faults: Arc<FaultInjector>,
    pub results: Arc<ResultStore>,
}

pub struct Invoker {
    id: InvokerId,
    config: InvokerConfig,
    grid: Arc<GridNode>,
    deps: InvokerDeps,
    router: RwLock<Option<Arc<dyn InvokerRouter>>>,
    locks: LockTable,
    crashed: AtomicBool,
    cursors: Mutex<HashMap<PartitionId, u64>>,
    consuming: DashMap<PartitionId, Arc<tokio::sync::Mutex<()>>>,
}

/// What the synchronous prelude of an invocation decided.
enum Plan {
    Locked {
        ticket: Ticket,
        class: ResolvedClass,
        binding: ResolvedBinding,
    },
    Macro {
        class: ResolvedClass,
        binding: ResolvedBinding,
    },
}

impl Invoker {
    pub fn new(id: InvokerId, config: InvokerConfig, grid: Arc<GridNode>, deps: InvokerDeps) -> Arc<Self> {
        Arc::new(Self {
            id,
            config,
            grid,
            deps,
            router: RwLock::new(None),
            locks: LockTable::new(),
            crashed: AtomicBool::new(false),
            cursors: Mutex::new(HashMap::new()),
            consuming: DashMap::new(),
        })
    }

    pub fn set_router(&self, router: Arc<dyn InvokerRouter>) {
        *self.router.write() = Some(router);
    }

    pub fn id(&self) -> &InvokerId {
        &self.id
    }

    pub fn index(&self) -> u32 {
        self.config.index
    }

    pub fn config(&self) -> &InvokerConfig {
        &self.config
    }

    pub fn grid(&self) -> &Arc<GridNode> {
        &self.grid
    }

    pub fn deps(&self) -> &InvokerDeps {
        &self.deps
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed.load(Ordering::SeqCst)
    }

    /// Simulated process death: every later call fails until the cluster
    /// replaces this invoker.
    pub fn crash(&self, at: &str) {
        if !self.crashed.swap(true, Ordering::SeqCst) {
            self.deps.faults.event(format!("crash {} at {at}", self.id));
            tracing::warn!(invoker = %self.id, at, "invoker crashed");
        }
    }

    fn alive(&self) -> Result<(), InvokeError> {
        if self.is_crashed() {
            Err(InvokeError::Crashed(format!("{} is down", self.id)))
        } else {
            Ok(())
        }
    }

    pub(crate) fn fire(&self, point: FaultPoint, env: &InvocationEnvelope) -> bool {
        self.deps.faults.fire(point, env.fault_ctx(self.config.index))
    }

    /// Crashes this invoker if `CRASH_INVOKER(index)` is armed for `env`.
    pub(crate) fn crash_point(&self, env: &InvocationEnvelope) -> Result<(), InvokeError> {
        let p = FaultPoint::CrashInvoker(self.config.index);
        if self.fire(p, env) {
            self.crash(&p.to_string());
            return Err(InvokeError::Crashed(p.to_string()));
        }
        Ok(())
    }

    /// Synchronous part of an invocation: ownership, resolution, access and
    /// the lock ticket. Runs at call time so that lock order is call order.
    fn plan(&self, env: &InvocationEnvelope) -> Result<Plan, InvokeError> {
        self.alive()?;
        let owner = self.grid.owner_of(&env.target_object_id)?;
        if owner != self.id {
            return Err(InvokeError::NotOwner { owner });
        }
        let class_ref = match self.grid.local_get(&env.target_object_id) {
            Ok(r) if !r.tombstone => r.class_ref,
            Ok(r) => env.class_ref.clone().unwrap_or(r.class_ref),
            Err(GridError::NotFound(_)) => env
                .class_ref
                .clone()
                .ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?,
            Err(e) => return Err(e.into()),
        };
        let (class, binding) = self.resolve_binding(&class_ref, &env.binding_name, &env.caller)?;
        if binding.kind == FunctionKind::Macro {
            return Ok(Plan::Macro { class, binding });
        }
        let ticket = self.locks.ticket(&env.target_object_id)?;
        Ok(Plan::Locked { ticket, class, binding })
    }

    pub(crate) fn resolve_binding(
        &self,
        class_ref: &str,
        binding: &str,
        caller: &CallerContext,
    ) -> Result<(ResolvedClass, ResolvedBinding), InvokeError> {
        let class = self.deps.registry.resolve_class(class_ref)?;
        let b = class
            .binding(binding)
            .cloned()
            .ok_or_else(|| InvokeError::NotFound(format!("binding {binding} on {class_ref}")))?;
        if let AccessDecision::Deny { rule, reason } = check_access(caller, class_ref, &b) {
            return Err(InvokeError::AccessDenied { rule, reason });
        }
        Ok((class, b))
    }

    /// Runs an invocation on this invoker, which must own the target. The
    /// lock ticket is taken before this returns.
    pub fn invoke_sync(self: &Arc<Self>, env: InvocationEnvelope) -> BoxFuture<'static, Result<InvocationResult, InvokeError>> {
        let plan = self.plan(&env);
        let this = self.clone();
        Box::pin(async move {
            let res = match plan? {
                Plan::Macro { class, binding } => dataflow::execute(&this, env.clone(), class, binding).await,
                Plan::Locked { ticket, class, binding } => {
                    let timeout = this.config.lock_timeout;
                    let inner = this.clone();
                    let e2 = env.clone();
                    this.locks
                        .hold(ticket, timeout, async move { inner.run_locked(e2, class, binding).await })
                        .await?
                }
            };
            let res = res.map(|mut r| {
                r.served_by = Some(this.id.clone());
                r
            });
            match &res {
                Ok(r) if !r.skipped => this.deps.results.set(r.clone()),
                Err(e) if !e.is_infra() => this
                    .deps
                    .results
                    .set(InvocationResult::failed(env.invocation_id.clone(), e.to_string())),
                _ => {}
            }
            res
        })
    }

    /// Runs `env` on the owner of its target, here or through the router.
    pub fn dispatch(self: &Arc<Self>, env: InvocationEnvelope) -> BoxFuture<'static, Result<InvocationResult, InvokeError>> {
        let owner = match self.grid.owner_of(&env.target_object_id) {
            Ok(o) => o,
            Err(e) => return Box::pin(async move { Err(e.into()) }),
        };
        if owner == self.id {
            return self.invoke_sync(env);
        }
        let router = self.router.read().clone();
        Box::pin(async move {
            let router = router.ok_or_else(|| InvokeError::Unreachable(format!("{owner} (no router)")))?;
            router.route(&owner, env).await
        })
    }

    async fn run_locked(
        self: Arc<Self>,
        env: InvocationEnvelope,
        class: ResolvedClass,
        binding: ResolvedBinding,
    ) -> Result<InvocationResult, InvokeError> {
        self.alive()?;
        let record = match self.grid.local_get(&env.target_object_id) {
            Ok(r) => Some(r),
            Err(GridError::NotFound(_)) => None,
            Err(e) => return Err(e.into()),
        };
        if let (Some(p), Some(off), Some(r)) = (env.partition_id, env.offset, &record) {
            if r.has_processed(p, off) {
                self.deps
                    .faults
                    .event(format!("skip {} offset {p}/{off}", env.invocation_id));
                let mut res = self
                    .deps
                    .results
                    .get(&env.invocation_id)
                    .filter(|r| r.status != InvocationStatus::Pending)
                    .unwrap_or_else(|| InvocationResult::done(env.invocation_id.clone()));
                res.skipped = true;
                return Ok(res);
            }
        }
        match binding.kind {
            FunctionKind::Builtin => self.run_builtin(&env, &class, &binding, record).await,
            FunctionKind::Task => self.run_task(&env, &class, &binding, record).await,
            FunctionKind::Macro => unreachable!("macros are not run under the object lock"),
        }
    }

    /// Commits `next` over `prev` (None for a new object), stamping the log
    /// offset for async calls and writing async commits through before the
    /// caller acknowledges the entry.
    async fn commit_main(
        &self,
        env: &InvocationEnvelope,
        prev_revision: u64,
        mut next: ObjectRecord,
    ) -> Result<u64, InvokeError> {
        next.revision = prev_revision + 1;
        if let (Some(p), Some(off)) = (env.partition_id, env.offset) {
            next.last_offset.insert(p, off);
        }
        // async and dataflow-step commits are written through: a replay
        // depends on them
        let durable = env.mode == Mode::Async || env.caller.via_dataflow_of.is_some();
        let res = self
            .grid
            .commit_with(&env.target_object_id, prev_revision, next, durable)
            .await;
        let committed = match res {
            Ok(c) => c,
            Err(GridError::RevisionConflict { expected, actual }) => {
                // the object lock makes this unreachable on a correctly routed owner
                debug_assert!(false, "revision conflict under object lock: {expected} vs {actual}");
                return Err(InvokeError::Grid(format!(
                    "revision conflict under object lock: expected {expected}, stored {actual}"
                )));
            }
            Err(e) => return Err(e.into()),
        };
        Ok(committed.new_revision)
    }

    async fn create_output(
        &self,
        env: &InvocationEnvelope,
        out_id: &ObjectId,
        class: &str,
        doc: Value,
        files: BTreeMap<String, String>,
    ) -> Result<(), InvokeError> {
        let mut rec = ObjectRecord::fresh(out_id.clone(), class);
        rec.doc = doc;
        rec.file_versions = files;
        rec.revision = 1;
        // outputs are durable at once; a dataflow replay relies on them
        match self.grid.commit_routed_with(out_id, 0, rec, true).await {
            Ok(_) => Ok(()),
            // an earlier attempt of the same invocation already created it
            Err(GridError::RevisionConflict { .. }) => {
                self.deps
                    .faults
                    .event(format!("output {out_id} of {} already exists", env.invocation_id));
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    async fn output_exists(&self, id: &ObjectId) -> Result<bool, InvokeError> {
        match self.grid.get(id).await {
            Ok(r) => Ok(!r.tombstone),
            Err(GridError::NotFound(_)) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    async fn run_builtin(
        &self,
        env: &InvocationEnvelope,
        class: &ResolvedClass,
        binding: &ResolvedBinding,
        record: Option<ObjectRecord>,
    ) -> Result<InvocationResult, InvokeError> {
        let inv = env.invocation_id.clone();
        let builtin = binding.builtin.expect("builtin binding carries its id");
        let live = record.clone().filter(|r| !r.tombstone);
        let args_doc = Value::Object(
            env.args
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect(),
        );
        let mut result = InvocationResult::done(inv.clone());
        match builtin {
            BuiltinId::New if binding.output_class.is_some() => {
                let out_id = env.output_id();
                if !(env.immutable && self.output_exists(&out_id).await?) {
                    let oc = binding.output_class.as_deref().unwrap_or_default();
                    self.create_output(env, &out_id, oc, args_doc, BTreeMap::new()).await?;
                } else {
                    result.skipped = true;
                }
                result.output_object_id = Some(out_id);
            }
            BuiltinId::New => {
                if live.is_some() {
                    return Err(InvokeError::AlreadyExists(env.target_object_id.clone()));
                }
                let prev = record.as_ref().map_or(0, |r| r.revision);
                let mut next = ObjectRecord::fresh(env.target_object_id.clone(), class.name.clone());
                next.doc = args_doc;
                if let Some(r) = &record {
                    next.last_offset = r.last_offset.clone();
                }
                result.new_revision = Some(self.commit_main(env, prev, next).await?);
            }
            BuiltinId::Get => {
                let r = live.ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?;
                result.return_doc = Some(serde_json::json!({
                    "doc": r.doc,
                    "fileVersions": r.file_versions,
                    "revision": r.revision,
                    "classRef": r.class_ref,
                }));
            }
            BuiltinId::Update => {
                let r = live.ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?;
                let mut next = r.clone();
                let mut doc = r.doc.as_object().cloned().unwrap_or_default();
                if let Value::Object(a) = args_doc {
                    doc.extend(a);
                }
                next.doc = Value::Object(doc);
                result.new_revision = Some(self.commit_main(env, r.revision, next).await?);
            }
            BuiltinId::Delete => {
                let r = live.ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?;
                let mut next = r.clone();
                next.tombstone = true;
                result.new_revision = Some(self.commit_main(env, r.revision, next).await?);
            }
        }
        Ok(result)
    }

    async fn run_task(
        &self,
        env: &InvocationEnvelope,
        class: &ResolvedClass,
        binding: &ResolvedBinding,
        record: Option<ObjectRecord>,
    ) -> Result<InvocationResult, InvokeError> {
        let inv = env.invocation_id.clone();
        let rec = record
            .filter(|r| !r.tombstone)
            .ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?;
        let out_id = binding.output_class.as_ref().map(|_| env.output_id());
        if env.immutable {
            let Some(out_id) = &out_id else {
                return Err(InvokeError::Invalid(format!(
                    "immutable call of {} which creates no output object",
                    binding.name
                )));
            };
            if self.output_exists(out_id).await? {
                let mut r = InvocationResult::done(inv);
                r.output_object_id = Some(out_id.clone());
                r.skipped = true;
                return Ok(r);
            }
        }

        let mut inputs = Vec::with_capacity(env.input_refs.len());
        for id in &env.input_refs {
            inputs.push(self.grid.get(id).await.map_err(|e| match e {
                GridError::NotFound(id) => InvokeError::Invalid(format!("input object {id} not found")),
                other => other.into(),
            })?);
        }
        let write_keys: Vec<String> = if env.immutable {
            Vec::new()
        } else {
            class.state_keys.iter().map(|k| k.name.clone()).collect()
        };
        let out_keys: Vec<String> = match &binding.output_class {
            Some(oc) => self
                .deps
                .registry
                .resolve_class(oc)?
                .state_keys
                .into_iter()
                .map(|k| k.name)
                .collect(),
            None => Vec::new(),
        };
        let function = self
            .deps
            .registry
            .catalog()
            .function(&binding.function)
            .ok_or_else(|| InvokeError::NotFound(format!("function {}", binding.function)))?;
        let endpoint = function
            .endpoint
            .ok_or_else(|| InvokeError::EngineFailure(format!("{} is not deployed", binding.function)))?;
        let task = build_task(
            &self.deps.gateway,
            TaskSpec {
                invocation_id: &inv,
                function: &binding.function,
                binding: &binding.name,
                endpoint: &endpoint,
                main: &rec,
                inputs: &inputs,
                args: &env.args,
                write_keys: &write_keys,
                output: match (&out_id, &binding.output_class) {
                    (Some(id), Some(oc)) => Some((id, oc.as_str(), out_keys.as_slice())),
                    _ => None,
                },
                timeout_secs: self.config.task_timeout_secs,
            },
        )
        .map_err(|e| InvokeError::Storage(e.to_string()))?;

        let completion = self
            .deps
            .engine
            .invoke(&task)
            .await
            .map_err(|e| InvokeError::EngineFailure(e.to_string()))?;
        if self.fire(FaultPoint::DropCompletion, env) {
            return Err(InvokeError::EngineFailure("completion dropped".into()));
        }
        if !completion.success {
            return Err(InvokeError::FunctionFailed(
                completion.error.unwrap_or_else(|| "function reported failure".into()),
            ));
        }
        if self.fire(FaultPoint::BeforePhase2Commit, env) {
            self.crash("BEFORE_PHASE2_COMMIT");
            return Err(InvokeError::Crashed("BEFORE_PHASE2_COMMIT".into()));
        }

        // phase 2: make the new versions visible
        let mut result = InvocationResult::done(inv);
        result.return_doc = completion.return_doc.clone();
        if let (Some(out), Some(out_id), Some(oc)) = (&completion.output_object, &out_id, &binding.output_class) {
            self.create_output(env, out_id, oc, out.doc.clone(), out.committed_keys.clone())
                .await?;
            result.output_object_id = Some(out_id.clone());
        } else if env.immutable {
            return Err(InvokeError::FunctionFailed("immutable call produced no output object".into()));
        }
        if !env.immutable {
            let mut next = rec.clone();
            if let Some(doc) = completion.new_doc {
                next.doc = doc;
            }
            next.file_versions.extend(completion.committed_keys);
            result.new_revision = Some(self.commit_main(env, rec.revision, next).await?);
        }
        Ok(result)
    }

    /// Accepts an async invocation: checks access and appends the envelope
    /// to the target's partition. Appending is idempotent per invocation id.
    pub async fn invoke_async(&self, mut env: InvocationEnvelope) -> Result<InvocationId, InvokeError> {
        self.alive()?;
        let class_ref = match self.grid.get(&env.target_object_id).await {
            Ok(r) if !r.tombstone => r.class_ref,
            Ok(r) => env.class_ref.clone().unwrap_or(r.class_ref),
            Err(GridError::NotFound(_)) => env
                .class_ref
                .clone()
                .ok_or_else(|| InvokeError::NotFound(format!("object {}", env.target_object_id)))?,
            Err(e) => return Err(e.into()),
        };
        self.resolve_binding(&class_ref, &env.binding_name, &env.caller)?;
        env.mode = Mode::Async;
        env.partition_id = None;
        env.offset = None;
        let payload = serde_json::to_vec(&env).expect("envelope serializes");
        let p = self.deps.log.partition_for(env.target_object_id.as_str());
        let appended = self
            .deps
            .log
            .append(p, &payload, env.invocation_id.as_str())
            .map_err(|e| InvokeError::Log(e.to_string()))?;
        self.deps.results.set_pending(&env.invocation_id);
        tracing::debug!(invocation = %env.invocation_id, partition = p, offset = appended.offset, duplicate = appended.duplicate, "async accepted");
        Ok(env.invocation_id)
    }

    /// Whether this invoker consumes partition `p`.
    pub fn consumes(&self, p: PartitionId) -> bool {
        ObjectId::new(format!("__partition-{p}"))
            .ok()
            .and_then(|k| self.grid.owner_of(&k).ok())
            .is_some_and(|o| o == self.id)
    }

    /// One consume step over partition `p`: processes up to `poll_batch`
    /// entries in order and acknowledges each after its commit. Stops at the
    /// first infrastructure error, leaving that entry for replay.
    pub async fn process_partition(self: &Arc<Self>, p: PartitionId) -> Result<usize, InvokeError> {
        self.alive()?;
        let gate = self.consuming.entry(p).or_default().clone();
        let _single = gate.lock().await;
        let log = self.deps.log.clone();
        let from = {
            let mut cursors = self.cursors.lock();
            match cursors.get(&p) {
                Some(c) => *c,
                None => {
                    let c = log.resume_offset(p).map_err(|e| InvokeError::Log(e.to_string()))?;
                    cursors.insert(p, c);
                    c
                }
            }
        };
        let entries = log
            .poll(p, from, self.config.poll_batch)
            .map_err(|e| InvokeError::Log(e.to_string()))?;
        let mut processed = 0;
        for e in entries {
            self.alive()?;
            let mut env: InvocationEnvelope = match serde_json::from_slice(&e.payload) {
                Ok(env) => env,
                Err(err) => {
                    tracing::error!(partition = p, offset = e.offset, error = %err, "undecodable log entry; skipping");
                    self.ack(p, e.offset)?;
                    continue;
                }
            };
            env.mode = Mode::Async;
            env.partition_id = Some(p);
            env.offset = Some(e.offset);
            match self.dispatch(env.clone()).await {
                Err(err) if err.is_infra() => {
                    tracing::warn!(partition = p, offset = e.offset, error = %err, "async entry left for replay");
                    return Err(err);
                }
                Err(err) => {
                    self.deps
                        .results
                        .set(InvocationResult::failed(env.invocation_id.clone(), err.to_string()));
                }
                Ok(r) if !r.skipped => self.deps.results.set(r),
                Ok(_) => {}
            }
            if self.deps.faults.fire(FaultPoint::AfterCommitBeforeAck, env.fault_ctx(self.config.index)) {
                self.crash("AFTER_COMMIT_BEFORE_ACK");
                return Err(InvokeError::Crashed("AFTER_COMMIT_BEFORE_ACK".into()));
            }
            if self.deps.faults.fire(FaultPoint::DuplicateDelivery, env.fault_ctx(self.config.index)) {
                match self.dispatch(env.clone()).await {
                    Ok(r) if r.skipped => {}
                    Ok(_) => tracing::error!(invocation = %env.invocation_id, "duplicate delivery was executed twice"),
                    Err(err) if err.is_infra() => return Err(err),
                    Err(_) => {}
                }
            }
            self.ack(p, e.offset)?;
            processed += 1;
        }
        Ok(processed)
    }

    fn ack(&self, p: PartitionId, offset: u64) -> Result<(), InvokeError> {
        self.deps
            .log
            .ack(p, offset)
            .map_err(|e| InvokeError::Log(e.to_string()))?;
        self.cursors.lock().insert(p, offset + 1);
        Ok(())
    }

    /// Forgets consumer positions; the next step resumes from the log's
    /// committed cursor.
    pub fn reset_cursors(&self) {
        self.cursors.lock().clear();
    }

    /// Moves the consumer position of `p` back to `offset`, so the next
    /// step redelivers everything from there.
    pub fn rewind(&self, p: PartitionId, offset: u64) {
        self.cursors.lock().insert(p, offset);
    }

    /// Processes every partition this invoker consumes until none has work
    /// left. Returns the number of entries processed.
    pub async fn drain(self: &Arc<Self>) -> Result<usize, InvokeError> {
        let mut total = 0;
        loop {
            let mut round = 0;
            for p in self.deps.log.partition_ids().collect::<Vec<_>>() {
                if self.consumes(p) {
                    round += self.process_partition(p).await?;
                }
            }
            if round == 0 {
                return Ok(total);
            }
            total += round;
        }
    }

    /// Background consumer over this invoker's partitions.
    pub fn spawn_consumer(self: &Arc<Self>, idle: Duration) -> tokio::task::JoinHandle<()> {
        let weak = Arc::downgrade(self);
        tokio::spawn(async move {
            loop {
                let Some(this) = weak.upgrade() else { break };
                if this.is_crashed() {
                    break;
                }
                let worked = match this.drain().await {
                    Ok(n) => n > 0,
                    Err(e) => {
                        tracing::debug!(invoker = %this.id, error = %e, "consumer step failed");
                        false
                    }
                };
                drop(this);
                if !worked {
                    tokio::time::sleep(idle).await;
                }
            }
        })
    }
}
