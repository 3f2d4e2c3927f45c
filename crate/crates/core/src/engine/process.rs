//! Local-process engine: one runtime process per deployed function.

use std::collections::HashMap;
use std::process::Stdio;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use tokio::process::{Child, Command};

use super::EngineError;

struct Running {
    child: Child,
    port: u16,
}

pub struct ProcessEngine {
    http: reqwest::Client,
    healthcheck_timeout: Duration,
    procs: Mutex<HashMap<String, Running>>,
}

impl ProcessEngine {
    pub(super) fn new(http: reqwest::Client, healthcheck_timeout: Duration) -> Self {
        Self {
            http,
            healthcheck_timeout,
            procs: Mutex::new(HashMap::new()),
        }
    }

    /// Spawns `command` with `PORT` set and waits for `GET /healthz`. The
    /// returned endpoint `process://{name}` stays the same across
    /// re-deploys; the previous process is retired once the new one is
    /// healthy.
    pub(super) async fn deploy(&self, name: &str, command: &str) -> Result<String, EngineError> {
        if command.is_empty() {
            return Err(EngineError::Spawn("empty command".into()));
        }
        let port = free_port().map_err(|e| EngineError::Spawn(e.to_string()))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(format!("exec {command}"))
            .env("PORT", port.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit())
            .kill_on_drop(true)
            .spawn()
            .map_err(|e| EngineError::Spawn(e.to_string()))?;

        let url = format!("http://127.0.0.1:{port}/healthz");
        let start = Instant::now();
        loop {
            if let Some(status) = child.try_wait().map_err(|e| EngineError::Spawn(e.to_string()))? {
                return Err(EngineError::Spawn(format!("{command:?} exited with {status}")));
            }
            if let Ok(r) = self.http.get(&url).timeout(Duration::from_millis(500)).send().await {
                if r.status().is_success() {
                    break;
                }
            }
            if start.elapsed() >= self.healthcheck_timeout {
                let _ = child.kill().await;
                return Err(EngineError::HealthcheckTimeout(self.healthcheck_timeout));
            }
            tokio::time::sleep(Duration::from_millis(50)).await;
        }

        let old = self.procs.lock().insert(name.to_string(), Running { child, port });
        if let Some(mut old) = old {
            let _ = old.child.kill().await;
        }
        tracing::info!(function = name, port, "runtime process healthy");
        Ok(format!("process://{name}"))
    }

    /// Current task URL behind a `process://` endpoint.
    pub(super) fn url_of(&self, endpoint: &str) -> Result<String, EngineError> {
        let name = endpoint.trim_start_matches("process://");
        self.procs
            .lock()
            .get(name)
            .map(|r| format!("http://127.0.0.1:{}/", r.port))
            .ok_or_else(|| EngineError::UnknownEndpoint(endpoint.to_string()))
    }

    /// Function name to process id of every live runtime.
    pub fn pids(&self) -> HashMap<String, u32> {
        self.procs
            .lock()
            .iter()
            .filter_map(|(n, r)| r.child.id().map(|p| (n.clone(), p)))
            .collect()
    }

    pub async fn shutdown(&self) {
        let procs: Vec<Running> = self.procs.lock().drain().map(|(_, r)| r).collect();
        for mut r in procs {
            let _ = r.child.kill().await;
        }
    }
}

fn free_port() -> std::io::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}
