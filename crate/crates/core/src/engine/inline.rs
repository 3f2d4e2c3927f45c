//! In-process engine: task handlers are Rust closures.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use futures::future::BoxFuture;
use parking_lot::RwLock;

use super::EngineError;
use crate::ids::{InvocationId, ObjectId};
use crate::protocol::{Task, TaskCompletion};
use crate::storage::{Gateway, GatewayError, Method, PresignedUrl};

pub type InlineHandler = Arc<dyn Fn(Task, InlineCtx) -> BoxFuture<'static, TaskCompletion> + Send + Sync>;

/// File I/O the way a function runtime does it: reads through the task's
/// read grant, writes to the presigned PUT it was given.
#[async_trait]
pub trait FileAccess: Send + Sync {
    /// Current content of `object/key`, or None if the key has no version.
    async fn read(
        &self,
        invocation: &InvocationId,
        token: &str,
        object: &ObjectId,
        key: &str,
    ) -> Result<Option<Vec<u8>>, String>;

    async fn write(&self, put_url: &str, bytes: Vec<u8>) -> Result<(), String>;
}

#[async_trait]
impl FileAccess for Gateway {
    async fn read(
        &self,
        invocation: &InvocationId,
        token: &str,
        object: &ObjectId,
        key: &str,
    ) -> Result<Option<Vec<u8>>, String> {
        let url = match self.read_redirect(object, key, invocation, token).await {
            Ok(u) => u,
            Err(GatewayError::NotFound) => return Ok(None),
            Err(e) => return Err(e.to_string()),
        };
        self.blob_get(&url).map(Some).map_err(|e| e.to_string())
    }

    async fn write(&self, put_url: &str, bytes: Vec<u8>) -> Result<(), String> {
        let url = PresignedUrl::parse(Method::Put, put_url).ok_or_else(|| format!("bad upload url {put_url}"))?;
        self.blob_put(&url, &bytes).map_err(|e| e.to_string())
    }
}

/// What an inline handler can reach besides its task.
#[derive(Clone, Default)]
pub struct InlineCtx {
    files: Option<Arc<dyn FileAccess>>,
}

impl InlineCtx {
    /// Reads a state key of an object the task holds a grant for.
    pub async fn read_file(&self, task: &Task, object: &ObjectId, key: &str) -> Result<Option<Vec<u8>>, String> {
        let files = self.files.as_ref().ok_or("no file access configured")?;
        let token = task
            .read_grants
            .get(object.as_str())
            .ok_or_else(|| format!("no read grant for {object}"))?;
        files.read(&task.invocation_id, token, object, key).await
    }

    pub async fn write_file(&self, put_url: &str, bytes: Vec<u8>) -> Result<(), String> {
        let files = self.files.as_ref().ok_or("no file access configured")?;
        files.write(put_url, bytes).await
    }
}

#[derive(Default)]
pub struct InlineEngine {
    handlers: RwLock<HashMap<String, InlineHandler>>,
    calls: RwLock<HashMap<String, Arc<AtomicU64>>>,
    files: RwLock<Option<Arc<dyn FileAccess>>>,
}

impl InlineEngine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_file_access(&self, files: Arc<dyn FileAccess>) {
        *self.files.write() = Some(files);
    }

    pub fn register(&self, name: &str, handler: InlineHandler) {
        self.handlers.write().insert(name.to_string(), handler);
    }

    /// Registers a synchronous handler.
    pub fn register_fn<F>(&self, name: &str, f: F)
    where
        F: Fn(&Task, &InlineCtx) -> TaskCompletion + Send + Sync + 'static,
    {
        let f = Arc::new(f);
        self.register(
            name,
            Arc::new(move |t: Task, ctx: InlineCtx| {
                let f = f.clone();
                Box::pin(async move { f(&t, &ctx) })
            }),
        );
    }

    pub fn has_handler(&self, name: &str) -> bool {
        self.handlers.read().contains_key(name)
    }

    /// Number of tasks dispatched to `name`.
    pub fn calls(&self, name: &str) -> u64 {
        self.calls
            .read()
            .get(name)
            .map_or(0, |c| c.load(Ordering::SeqCst))
    }

    pub fn reset_calls(&self) {
        self.calls.write().clear();
    }

    /// An explicit `inline://name` must name a registered handler; any other
    /// spec maps to `inline://{qualified_name}` for later registration.
    pub(super) fn deploy(&self, qualified_name: &str, spec: &str) -> Result<String, EngineError> {
        match spec.strip_prefix("inline://") {
            Some(name) if self.has_handler(name) => Ok(spec.to_string()),
            Some(name) => Err(EngineError::Spawn(format!("no inline handler named {name}"))),
            None => Ok(format!("inline://{qualified_name}")),
        }
    }

    pub(super) async fn invoke(&self, endpoint: &str, task: Task) -> Result<TaskCompletion, EngineError> {
        let name = endpoint.strip_prefix("inline://").unwrap_or(endpoint);
        let handler = self
            .handlers
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| EngineError::UnknownEndpoint(endpoint.to_string()))?;
        self.calls
            .write()
            .entry(name.to_string())
            .or_default()
            .fetch_add(1, Ordering::SeqCst);
        let ctx = InlineCtx {
            files: self.files.read().clone(),
        };
        Ok(handler(task, ctx).await)
    }
}
