//! Execution plane adapter.
//!
//! Deploy specs pick the engine by scheme:
//!
//! * `inline://name` runs a Rust handler registered with [`InlineEngine`].
//! * `process:COMMAND` spawns `sh -c COMMAND` with `PORT` set, waits for
//!   `GET /healthz`, and talks task protocol v1 over HTTP.
//! * `http://...` / `https://...` is a remote runtime used as is.
//!
//! Any other spec (an image URI, say) goes to the configured default engine.

mod inline;
mod process;
pub mod samples;

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::protocol::{validate_completion, ProtocolViolation, Task, TaskCompletion};
use crate::registry::FunctionDeployer;

pub use inline::{FileAccess, InlineCtx, InlineEngine, InlineHandler};
pub use process::ProcessEngine;
pub use samples::register_samples;

pub const DEFAULT_INVOKE_TIMEOUT: Duration = Duration::from_secs(120);
pub const DEFAULT_HEALTHCHECK_TIMEOUT: Duration = Duration::from_secs(10);
pub const DEFAULT_CONCURRENCY_CAP: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum EngineError {
    #[error("spawn failed: {0}")]
    Spawn(String),
    #[error("runtime not healthy within {0:?}")]
    HealthcheckTimeout(Duration),
    #[error("no such endpoint: {0}")]
    UnknownEndpoint(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invocation timed out after {0:?}")]
    Timeout(Duration),
    #[error("{0}")]
    Protocol(String),
    #[error("unsupported deploy spec: {0}")]
    Unsupported(String),
}

impl From<ProtocolViolation> for EngineError {
    fn from(v: ProtocolViolation) -> Self {
        EngineError::Protocol(v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    #[default]
    Inline,
    LocalProcess,
    RemoteHttp,
}

impl std::str::FromStr for EngineKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "inline" => Ok(EngineKind::Inline),
            "local-process" => Ok(EngineKind::LocalProcess),
            "remote-http" => Ok(EngineKind::RemoteHttp),
            _ => Err(format!("unknown engine {s:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub default_engine: EngineKind,
    pub invoke_timeout: Duration,
    pub healthcheck_timeout: Duration,
    /// Concurrent invocations per endpoint.
    pub concurrency_cap: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            default_engine: EngineKind::Inline,
            invoke_timeout: DEFAULT_INVOKE_TIMEOUT,
            healthcheck_timeout: DEFAULT_HEALTHCHECK_TIMEOUT,
            concurrency_cap: DEFAULT_CONCURRENCY_CAP,
        }
    }
}

/// Deploys functions and runs tasks on whichever engine the endpoint names.
pub struct EngineAdapter {
    config: EngineConfig,
    inline: Arc<InlineEngine>,
    process: ProcessEngine,
    http: reqwest::Client,
    limits: Mutex<HashMap<String, Arc<Semaphore>>>,
}

impl EngineAdapter {
    pub fn new(config: EngineConfig, inline: Arc<InlineEngine>) -> Self {
        let http = reqwest::Client::builder()
            .no_proxy()
            .build()
            .expect("http client");
        Self {
            process: ProcessEngine::new(http.clone(), config.healthcheck_timeout),
            config,
            inline,
            http,
            limits: Mutex::new(HashMap::new()),
        }
    }

    pub fn inline(&self) -> &Arc<InlineEngine> {
        &self.inline
    }

    pub fn process(&self) -> &ProcessEngine {
        &self.process
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub async fn deploy(&self, qualified_name: &str, spec: &str) -> Result<String, EngineError> {
        if spec.starts_with("inline://") {
            return self.inline.deploy(qualified_name, spec);
        }
        if let Some(cmd) = spec.strip_prefix("process:") {
            return self.process.deploy(qualified_name, cmd.trim()).await;
        }
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(spec.to_string());
        }
        match self.config.default_engine {
            EngineKind::Inline => self.inline.deploy(qualified_name, spec),
            EngineKind::LocalProcess => self.process.deploy(qualified_name, spec).await,
            EngineKind::RemoteHttp => Err(EngineError::Unsupported(spec.to_string())),
        }
    }

    fn limit(&self, endpoint: &str) -> Arc<Semaphore> {
        self.limits
            .lock()
            .entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(self.config.concurrency_cap)))
            .clone()
    }

    /// Runs `task` on its endpoint and validates the completion against it.
    pub async fn invoke(&self, task: &Task) -> Result<TaskCompletion, EngineError> {
        let endpoint = task.function_endpoint.clone();
        let permit = self.limit(&endpoint);
        let _permit = permit.acquire().await.expect("semaphore never closed");
        let run = async {
            if endpoint.starts_with("inline://") {
                self.inline.invoke(&endpoint, task.clone()).await
            } else if endpoint.starts_with("process://") {
                let url = self.process.url_of(&endpoint)?;
                post_task(&self.http, &url, task).await
            } else {
                post_task(&self.http, &endpoint, task).await
            }
        };
        let completion = tokio::time::timeout(self.config.invoke_timeout, run)
            .await
            .map_err(|_| EngineError::Timeout(self.config.invoke_timeout))??;
        validate_completion(task, &completion)?;
        Ok(completion)
    }

    /// Like [`EngineAdapter::invoke`], but any error becomes a failed completion.
    pub async fn invoke_or_fail(&self, task: &Task) -> TaskCompletion {
        match self.invoke(task).await {
            Ok(c) => c,
            Err(e) => {
                tracing::warn!(invocation = %task.invocation_id, error = %e, "task failed in engine");
                TaskCompletion::failed(task.invocation_id.clone(), e.to_string())
            }
        }
    }

    pub async fn shutdown(&self) {
        self.process.shutdown().await;
    }
}

#[async_trait]
impl FunctionDeployer for EngineAdapter {
    async fn deploy(&self, qualified_name: &str, endpoint_spec: &str) -> Result<String, String> {
        EngineAdapter::deploy(self, qualified_name, endpoint_spec)
            .await
            .map_err(|e| e.to_string())
    }
}

/// POSTs a task and parses the completion. A non-2xx response with a
/// completion body still counts as a completion.
pub async fn post_task(http: &reqwest::Client, url: &str, task: &Task) -> Result<TaskCompletion, EngineError> {
    let resp = http
        .post(url)
        .json(task)
        .send()
        .await
        .map_err(|e| EngineError::Transport(e.to_string()))?;
    let status = resp.status();
    let body = resp
        .bytes()
        .await
        .map_err(|e| EngineError::Transport(e.to_string()))?;
    match TaskCompletion::from_json(&body) {
        Ok(c) => Ok(c),
        Err(_) if !status.is_success() => Err(EngineError::Transport(format!("runtime answered {status}"))),
        Err(v) => Err(v.into()),
    }
}
