//! In-process cluster: N invokers over one document store, blob store,
//! message log, registry and engine adapter.
//!
//! Crashing an invoker discards its memory (including records not yet
//! flushed) and stops it; restarting builds a fresh node with the same id
//! that reloads state from the store.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::engine::{register_samples, EngineAdapter, EngineConfig, InlineEngine};
use crate::fault::FaultInjector;
use crate::grid::{GridConfig, GridNode, LocalGridTransport};
use crate::ids::{InvocationId, InvokerId, ObjectId};
use crate::ingress::Ingress;
use crate::invoker::{InvocationEnvelope, InvocationResult, InvokeError, Invoker, InvokerConfig, InvokerDeps, LocalRouter, ResultStore};
use crate::log::{LogConfig, LogError, MessageLog};
use crate::record::ObjectRecord;
use crate::registry::{RegistrationReport, Registry, RegistryError};
use crate::ring::Membership;
use crate::storage::{referenced_paths, FsBlobStore, Gateway, GatewayConfig};
use crate::store::{DocumentStore, FileDocStore, StoreError};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("log: {0}")]
    Log(#[from] LogError),
    #[error("no invoker at index {0}")]
    NoInvoker(usize),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error("async work not drained after {0} rounds")]
    NotDrained(usize),
}

#[derive(Clone)]
pub struct ClusterConfig {
    pub invokers: usize,
    pub data_dir: PathBuf,
    pub secret: Vec<u8>,
    pub fault_seed: u64,
    pub log: LogConfig,
    pub grid: GridConfig,
    pub engine: EngineConfig,
    pub invoker: InvokerConfig,
    pub gateway: GatewayConfig,
    pub clock: Arc<dyn Clock>,
    /// Run write-behind flushers and async consumers in the background.
    pub background: bool,
    pub consumer_idle: Duration,
}

impl ClusterConfig {
    pub fn new(invokers: usize, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            invokers,
            data_dir: data_dir.into(),
            secret: b"oprc-dev-secret".to_vec(),
            fault_seed: 0,
            log: LogConfig::default(),
            grid: GridConfig::default(),
            engine: EngineConfig::default(),
            invoker: InvokerConfig::default(),
            gateway: GatewayConfig::default(),
            clock: Arc::new(SystemClock),
            background: false,
            consumer_idle: Duration::from_millis(5),
        }
    }
}

struct Slot {
    invoker: Arc<Invoker>,
    tasks: Vec<tokio::task::JoinHandle<()>>,
}

impl Slot {
    fn stop(&mut self) {
        for t in self.tasks.drain(..) {
            t.abort();
        }
    }
}

pub struct Cluster {
    config: ClusterConfig,
    membership: Membership,
    store: Arc<dyn DocumentStore>,
    transport: Arc<LocalGridTransport>,
    router: Arc<LocalRouter>,
    deps: InvokerDeps,
    observer: Arc<GridNode>,
    ingress: Ingress,
    slots: RwLock<Vec<Slot>>,
    restarts: Mutex<usize>,
}

pub fn invoker_id(i: usize) -> InvokerId {
    InvokerId::new(format!("inv-{i}")).expect("valid invoker id")
}

impl Cluster {
    /// Builds and starts the cluster. Must run inside a tokio runtime.
    pub fn start(config: ClusterConfig) -> Result<Arc<Self>, ClusterError> {
        let dir = &config.data_dir;
        std::fs::create_dir_all(dir)?;
        let store: Arc<dyn DocumentStore> = Arc::new(FileDocStore::open(dir.join("store"))?);
        let log = Arc::new(MessageLog::open(dir.join("log"), config.log.clone())?);
        let blobs = Arc::new(FsBlobStore::open(dir.join("blobs"), config.clock.clone())?);
        let gateway = Arc::new(Gateway::new(
            config.secret.clone(),
            blobs,
            config.clock.clone(),
            config.gateway.clone(),
        ));
        let inline = Arc::new(InlineEngine::new());
        register_samples(&inline);
        inline.set_file_access(gateway.clone());
        let engine = Arc::new(EngineAdapter::new(config.engine.clone(), inline));
        let registry = Arc::new(Registry::new(engine.clone()));
        let deps = InvokerDeps {
            registry,
            engine,
            gateway: gateway.clone(),
            log,
            faults: Arc::new(FaultInjector::new(config.fault_seed)),
            results: Arc::new(ResultStore::new()),
        };
        let membership = Membership::new(1, (0..config.invokers).map(invoker_id).collect());
        let transport = LocalGridTransport::new();
        let router = LocalRouter::new();

        // a non-member node that only routes; serves the gateway's lookups
        let observer = GridNode::new(
            InvokerId::new("observer").expect("valid id"),
            membership.clone(),
            store.clone(),
            config.grid.clone(),
        );
        observer.set_transport(transport.clone());
        gateway.set_resolver(observer.clone());

        let ingress = Ingress::new(router.clone(), deps.results.clone(), membership.clone());
        let cluster = Arc::new(Self {
            config,
            membership,
            store,
            transport,
            router,
            deps,
            observer,
            ingress,
            slots: RwLock::new(Vec::new()),
            restarts: Mutex::new(0),
        });
        let slots = (0..cluster.config.invokers).map(|i| cluster.boot(i)).collect();
        *cluster.slots.write() = slots;
        Ok(cluster)
    }

    fn boot(&self, i: usize) -> Slot {
        let id = invoker_id(i);
        let node = GridNode::new(id.clone(), self.membership.clone(), self.store.clone(), self.config.grid.clone());
        node.set_transport(self.transport.clone());
        self.transport.register(&node);
        let config = InvokerConfig {
            index: i as u32,
            ..self.config.invoker.clone()
        };
        let invoker = Invoker::new(id, config, node.clone(), self.deps.clone());
        invoker.set_router(self.router.clone());
        self.router.register(&invoker);
        let mut tasks = Vec::new();
        if self.config.background {
            tasks.push(node.spawn_flusher());
            tasks.push(invoker.spawn_consumer(self.config.consumer_idle));
        }
        Slot { invoker, tasks }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn membership(&self) -> &Membership {
        &self.membership
    }

    pub fn deps(&self) -> &InvokerDeps {
        &self.deps
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.deps.registry
    }

    pub fn engine(&self) -> &Arc<EngineAdapter> {
        &self.deps.engine
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.deps.gateway
    }

    pub fn log(&self) -> &Arc<MessageLog> {
        &self.deps.log
    }

    pub fn faults(&self) -> &Arc<FaultInjector> {
        &self.deps.faults
    }

    pub fn results(&self) -> &Arc<ResultStore> {
        &self.deps.results
    }

    pub fn store(&self) -> &Arc<dyn DocumentStore> {
        &self.store
    }

    pub fn ingress(&self) -> &Ingress {
        &self.ingress
    }

    pub fn router(&self) -> &Arc<LocalRouter> {
        &self.router
    }

    pub fn invoker(&self, i: usize) -> Result<Arc<Invoker>, ClusterError> {
        self.slots
            .read()
            .get(i)
            .map(|s| s.invoker.clone())
            .ok_or(ClusterError::NoInvoker(i))
    }

    pub fn invokers(&self) -> Vec<Arc<Invoker>> {
        self.slots.read().iter().map(|s| s.invoker.clone()).collect()
    }

    pub fn owner_index(&self, id: &ObjectId) -> Option<usize> {
        let owner = self.ingress.owner_of(id).ok()?;
        self.membership.members.iter().position(|m| *m == owner)
    }

    /// Number of invoker restarts so far.
    pub fn restarts(&self) -> usize {
        *self.restarts.lock()
    }

    pub async fn apply(&self, yaml: &str) -> Result<RegistrationReport, RegistryError> {
        self.deps.registry.apply_text(yaml).await
    }

    pub async fn invoke(&self, env: InvocationEnvelope) -> Result<InvocationResult, InvokeError> {
        self.ingress.invoke(env).await
    }

    pub async fn invoke_async(&self, env: InvocationEnvelope) -> Result<InvocationId, InvokeError> {
        self.ingress.invoke_async(env).await
    }

    pub fn result(&self, id: &InvocationId) -> Option<InvocationResult> {
        self.deps.results.get(id)
    }

    /// Current record as any client would see it.
    pub async fn get(&self, id: &ObjectId) -> Result<ObjectRecord, InvokeError> {
        Ok(self.observer.get(id).await?)
    }

    /// Marks invoker `i` as dead.
    pub fn crash(&self, i: usize) -> Result<(), ClusterError> {
        self.invoker(i)?.crash("external kill");
        Ok(())
    }

    /// Replaces invoker `i` with a fresh process that has only what the
    /// store holds.
    pub fn restart(&self, i: usize) -> Result<(), ClusterError> {
        let mut slots = self.slots.write();
        let slot = slots.get_mut(i).ok_or(ClusterError::NoInvoker(i))?;
        slot.invoker.crash("restart");
        slot.stop();
        self.router.remove(slot.invoker.id());
        *slot = self.boot(i);
        *self.restarts.lock() += 1;
        self.deps.faults.event(format!("restart {}", invoker_id(i)));
        tracing::info!(invoker = i, "invoker restarted");
        Ok(())
    }

    /// Restarts every crashed invoker. Returns how many were restarted.
    pub fn recover(&self) -> Result<usize, ClusterError> {
        let crashed: Vec<usize> = self
            .slots
            .read()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.invoker.is_crashed())
            .map(|(i, _)| i)
            .collect();
        for &i in &crashed {
            self.restart(i)?;
        }
        Ok(crashed.len())
    }

    /// Whether every log entry has been acknowledged.
    pub fn drained(&self) -> Result<bool, ClusterError> {
        let log = &self.deps.log;
        for p in log.partition_ids() {
            let len = log.len(p)?;
            if len > 0 && log.committed(p)? != Some(len - 1) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Consumes async work in the foreground, restarting crashed invokers,
    /// until every entry is acknowledged.
    pub async fn drain(&self) -> Result<(), ClusterError> {
        const MAX_ROUNDS: usize = 10_000;
        for _ in 0..MAX_ROUNDS {
            self.recover()?;
            for inv in self.invokers() {
                if let Err(e) = inv.drain().await {
                    tracing::debug!(invoker = %inv.id(), error = %e, "drain step failed");
                }
            }
            if self.drained()? {
                return Ok(());
            }
            tokio::task::yield_now().await;
        }
        Err(ClusterError::NotDrained(MAX_ROUNDS))
    }

    /// Redelivers every log entry from offset 0 to its consumer. Returns the
    /// number of entries delivered.
    pub async fn replay(&self) -> Result<usize, ClusterError> {
        self.recover()?;
        let mut delivered = 0;
        for inv in self.invokers() {
            for p in self.deps.log.partition_ids().collect::<Vec<_>>() {
                if inv.consumes(p) {
                    inv.rewind(p, 0);
                }
            }
            delivered += inv.drain().await.map_err(|e| ClusterError::Replay(e.to_string()))?;
        }
        Ok(delivered)
    }

    /// Writes every dirty record to the store.
    pub fn flush(&self) -> usize {
        self.invokers()
            .iter()
            .filter(|i| !i.is_crashed())
            .map(|i| i.grid().flush().unwrap_or(0))
            .sum()
    }

    /// Purges blob versions that no record references. Flushes first so
    /// the store holds every committed version.
    pub fn gc(&self) -> Result<usize, ClusterError> {
        self.flush();
        let records = self.store.scan()?;
        Ok(self.deps.gateway.gc(&referenced_paths(&records)))
    }

    /// Flushes state and stops background work and runtime processes.
    pub async fn shutdown(&self) {
        self.flush();
        for s in self.slots.write().iter_mut() {
            s.stop();
        }
        self.deps.engine.shutdown().await;
    }
}
