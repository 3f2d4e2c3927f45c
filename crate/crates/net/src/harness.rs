//! HTTP cluster harness: control plane, ingress, storage gateway and N
//! invokers, each on its own deterministic port, talking to each other only
//! over HTTP.
//!
//! Ports, counted from `base_port`: control `+0`, ingress `+1`, gateway
//! `+2`, invoker `i` at `+10+i`.

use std::net::{SocketAddr, TcpListener as StdListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use axum::Router;
use parking_lot::{Mutex, RwLock};
use thiserror::Error;
use tokio::sync::{oneshot, Notify};

use oprc_core::clock::SystemClock;
use oprc_core::cluster::invoker_id;
use oprc_core::engine::{register_samples, EngineAdapter, EngineConfig, InlineEngine};
use oprc_core::fault::FaultInjector;
use oprc_core::grid::{GridConfig, GridNode};
use oprc_core::ids::InvokerId;
use oprc_core::ingress::Ingress;
use oprc_core::invoker::{Invoker, InvokerConfig, InvokerDeps, ResultStore};
use oprc_core::log::{LogConfig, MessageLog};
use oprc_core::registry::Registry;
use oprc_core::ring::Membership;
use oprc_core::storage::{referenced_paths, FsBlobStore, Gateway, GatewayConfig};
use oprc_core::store::{DocumentStore, FileDocStore};

use crate::client::{http_client, HttpFileAccess, HttpGridTransport, HttpRouter, OprcClient, PeerTable};
use crate::server::{control_router, gateway_router, ingress_router, invoker_router, ControlHooks, ControlState};

pub const DEFAULT_BASE_PORT: u16 = 17400;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("startup: {0}")]
    Startup(String),
    #[error("no invoker at index {0}")]
    NoInvoker(usize),
}

#[derive(Clone)]
pub struct HttpClusterConfig {
    pub invokers: usize,
    pub base_port: u16,
    pub data_dir: PathBuf,
    pub secret: Vec<u8>,
    pub fault_seed: u64,
    pub log: LogConfig,
    pub grid: GridConfig,
    pub engine: EngineConfig,
    pub invoker: InvokerConfig,
    pub consumer_idle: Duration,
}

impl HttpClusterConfig {
    pub fn new(invokers: usize, base_port: u16, data_dir: impl Into<PathBuf>) -> Self {
        Self {
            invokers,
            base_port,
            data_dir: data_dir.into(),
            secret: b"oprc-dev-secret".to_vec(),
            fault_seed: 0,
            log: LogConfig::default(),
            grid: GridConfig::default(),
            engine: EngineConfig::default(),
            invoker: InvokerConfig::default(),
            consumer_idle: Duration::from_millis(5),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ports {
    pub base: u16,
}

impl Ports {
    pub fn control(&self) -> u16 {
        self.base
    }

    pub fn ingress(&self) -> u16 {
        self.base + 1
    }

    pub fn gateway(&self) -> u16 {
        self.base + 2
    }

    pub fn invoker(&self, i: usize) -> u16 {
        self.base + 10 + i as u16
    }
}

pub fn url(port: u16) -> String {
    format!("http://127.0.0.1:{port}")
}

struct Server {
    stop: Option<oneshot::Sender<()>>,
    handle: tokio::task::JoinHandle<()>,
}

impl Server {
    fn spawn(listener: StdListener, app: Router) -> Result<Self, HarnessError> {
        listener.set_nonblocking(true)?;
        let listener = tokio::net::TcpListener::from_std(listener)?;
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(async move {
            let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                let _ = rx.await;
            });
            if let Err(e) = serve.await {
                tracing::error!(error = %e, "server failed");
            }
        });
        Ok(Self { stop: Some(tx), handle })
    }

    /// Stops accepting and drops in-flight connections.
    fn kill(&mut self) {
        self.stop.take();
        self.handle.abort();
    }
}

fn bind(port: u16) -> Result<StdListener, HarnessError> {
    StdListener::bind(SocketAddr::from(([127, 0, 0, 1], port))).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => HarnessError::PortInUse(port),
        _ => HarnessError::Io(e),
    })
}

struct Member {
    invoker: Arc<Invoker>,
    server: Server,
    tasks: Vec<tokio::task::JoinHandle<()>>,
    alive: bool,
}

impl Member {
    fn stop(&mut self) {
        self.server.kill();
        for t in self.tasks.drain(..) {
            t.abort();
        }
        self.alive = false;
    }
}

struct Inner {
    config: HttpClusterConfig,
    ports: Ports,
    membership: Membership,
    store: Arc<dyn DocumentStore>,
    deps: InvokerDeps,
    peers: Arc<PeerTable>,
    members: RwLock<Vec<Member>>,
    services: Mutex<Vec<Server>>,
    stopped: AtomicBool,
    shutdown: Notify,
}

impl Inner {
    fn flush(&self) {
        for m in self.members.read().iter().filter(|m| m.alive) {
            if let Err(e) = m.invoker.grid().flush() {
                tracing::warn!(invoker = %m.invoker.id(), error = %e, "flush failed");
            }
        }
    }

    fn gc(&self) -> Result<usize, String> {
        self.flush();
        let records = self.store.scan().map_err(|e| e.to_string())?;
        Ok(self.deps.gateway.gc(&referenced_paths(&records)))
    }

    fn boot(&self, i: usize, listener: StdListener) -> Result<Member, HarnessError> {
        let id = invoker_id(i);
        let node = GridNode::new(id.clone(), self.membership.clone(), self.store.clone(), self.config.grid.clone());
        node.set_transport(Arc::new(HttpGridTransport::new(self.peers.clone())));
        let config = InvokerConfig {
            index: i as u32,
            ..self.config.invoker.clone()
        };
        let invoker = Invoker::new(id, config, node.clone(), self.deps.clone());
        invoker.set_router(Arc::new(HttpRouter::new(self.peers.clone())));
        let server = Server::spawn(listener, invoker_router(invoker.clone()))?;
        let tasks = vec![node.spawn_flusher(), invoker.spawn_consumer(self.config.consumer_idle)];
        Ok(Member {
            invoker,
            server,
            tasks,
            alive: true,
        })
    }
}

struct Hooks(Weak<Inner>);

impl ControlHooks for Hooks {
    fn gc(&self) -> Result<usize, String> {
        self.0.upgrade().ok_or("cluster is gone")?.gc()
    }

    fn shutdown(&self) {
        if let Some(inner) = self.0.upgrade() {
            inner.shutdown.notify_waiters();
            inner.shutdown.notify_one();
        }
    }
}

pub struct HttpCluster {
    inner: Arc<Inner>,
}

impl HttpCluster {
    /// Starts every component. All ports are bound before anything runs, so
    /// a busy port fails the whole start with `PortInUse`.
    pub async fn up(config: HttpClusterConfig) -> Result<Self, HarnessError> {
        let ports = Ports { base: config.base_port };
        let control_l = bind(ports.control())?;
        let ingress_l = bind(ports.ingress())?;
        let gateway_l = bind(ports.gateway())?;
        let invoker_ls = (0..config.invokers)
            .map(|i| bind(ports.invoker(i)))
            .collect::<Result<Vec<_>, _>>()?;

        let dir = &config.data_dir;
        std::fs::create_dir_all(dir)?;
        let startup = |e: &dyn std::fmt::Display| HarnessError::Startup(e.to_string());
        let store: Arc<dyn DocumentStore> = Arc::new(FileDocStore::open(dir.join("store")).map_err(|e| startup(&e))?);
        let log = Arc::new(MessageLog::open(dir.join("log"), config.log.clone()).map_err(|e| startup(&e))?);
        let clock = Arc::new(SystemClock);
        let blobs = Arc::new(FsBlobStore::open(dir.join("blobs"), clock.clone())?);
        let gateway = Arc::new(Gateway::new(
            config.secret.clone(),
            blobs,
            clock,
            GatewayConfig {
                base_url: url(ports.gateway()),
                ..GatewayConfig::default()
            },
        ));
        let inline = Arc::new(InlineEngine::new());
        register_samples(&inline);
        inline.set_file_access(Arc::new(HttpFileAccess::new(url(ports.gateway()))));
        let engine = Arc::new(EngineAdapter::new(config.engine.clone(), inline));
        let registry = Arc::new(Registry::new(engine.clone()));
        let deps = InvokerDeps {
            registry: registry.clone(),
            engine,
            gateway: gateway.clone(),
            log,
            faults: Arc::new(FaultInjector::new(config.fault_seed)),
            results: Arc::new(ResultStore::new()),
        };
        let membership = Membership::new(1, (0..config.invokers).map(invoker_id).collect());
        let peers = Arc::new(PeerTable::new());
        for i in 0..config.invokers {
            peers.set(invoker_id(i), url(ports.invoker(i)));
        }

        // routes the gateway's version lookups to owners over HTTP
        let observer = GridNode::new(
            InvokerId::new("gateway").expect("valid id"),
            membership.clone(),
            store.clone(),
            config.grid.clone(),
        );
        observer.set_transport(Arc::new(HttpGridTransport::new(peers.clone())));
        gateway.set_resolver(observer);

        let inner = Arc::new(Inner {
            config,
            ports,
            membership: membership.clone(),
            store,
            deps: deps.clone(),
            peers: peers.clone(),
            members: RwLock::new(Vec::new()),
            services: Mutex::new(Vec::new()),
            stopped: AtomicBool::new(false),
            shutdown: Notify::new(),
        });
        let members = invoker_ls
            .into_iter()
            .enumerate()
            .map(|(i, l)| inner.boot(i, l))
            .collect::<Result<Vec<_>, _>>()?;
        *inner.members.write() = members;

        let ingress = Arc::new(Ingress::new(
            Arc::new(HttpRouter::new(peers.clone())),
            deps.results.clone(),
            membership.clone(),
        ));
        let control = ControlState {
            registry,
            membership,
            peers,
            hooks: Arc::new(Hooks(Arc::downgrade(&inner))),
            http: http_client(),
        };
        *inner.services.lock() = vec![
            Server::spawn(control_l, control_router(control))?,
            Server::spawn(ingress_l, ingress_router(ingress))?,
            Server::spawn(gateway_l, gateway_router(gateway))?,
        ];
        tracing::info!(base_port = ports.base, invokers = inner.config.invokers, "cluster up");
        Ok(Self { inner })
    }

    pub fn ports(&self) -> Ports {
        self.inner.ports
    }

    pub fn control_url(&self) -> String {
        url(self.inner.ports.control())
    }

    pub fn ingress_url(&self) -> String {
        url(self.inner.ports.ingress())
    }

    pub fn gateway_url(&self) -> String {
        url(self.inner.ports.gateway())
    }

    pub fn invoker_url(&self, i: usize) -> String {
        url(self.inner.ports.invoker(i))
    }

    pub fn client(&self) -> OprcClient {
        OprcClient::new(self.control_url(), self.ingress_url())
    }

    pub fn deps(&self) -> &InvokerDeps {
        &self.inner.deps
    }

    pub fn membership(&self) -> &Membership {
        &self.inner.membership
    }

    pub fn invoker(&self, i: usize) -> Result<Arc<Invoker>, HarnessError> {
        self.inner
            .members
            .read()
            .get(i)
            .map(|m| m.invoker.clone())
            .ok_or(HarnessError::NoInvoker(i))
    }

    /// Stops invoker `i` abruptly: its server, flusher and consumer go away
    /// and unflushed state is lost.
    pub fn kill(&self, i: usize) -> Result<(), HarnessError> {
        let mut members = self.inner.members.write();
        let m = members.get_mut(i).ok_or(HarnessError::NoInvoker(i))?;
        m.invoker.crash("killed");
        m.stop();
        Ok(())
    }

    /// Starts a fresh invoker `i` on its port; state comes from the store.
    pub async fn restart(&self, i: usize) -> Result<(), HarnessError> {
        if i >= self.inner.config.invokers {
            return Err(HarnessError::NoInvoker(i));
        }
        self.kill(i)?;
        let port = self.inner.ports.invoker(i);
        // the old listener closes asynchronously after the abort
        let mut listener = bind(port);
        for _ in 0..100 {
            if listener.is_ok() {
                break;
            }
            tokio::time::sleep(Duration::from_millis(20)).await;
            listener = bind(port);
        }
        let member = self.inner.boot(i, listener?)?;
        self.inner.members.write()[i] = member;
        Ok(())
    }

    pub fn flush(&self) {
        self.inner.flush();
    }

    pub fn gc(&self) -> Result<usize, String> {
        self.inner.gc()
    }

    /// Resolves when a client asks the control plane to shut down.
    pub async fn wait_for_shutdown_request(&self) {
        self.inner.shutdown.notified().await;
    }

    /// Stops everything. Calling it again is a no-op.
    pub async fn down(&self) {
        if self.inner.stopped.swap(true, Ordering::SeqCst) {
            return;
        }
        self.inner.flush();
        for m in self.inner.members.write().iter_mut() {
            m.stop();
        }
        for mut s in self.inner.services.lock().drain(..) {
            s.kill();
        }
        self.inner.deps.engine.shutdown().await;
        tracing::info!("cluster down");
    }
}

impl Drop for HttpCluster {
    fn drop(&mut self) {
        for m in self.inner.members.write().iter_mut() {
            m.stop();
        }
        for mut s in self.inner.services.lock().drain(..) {
            s.kill();
        }
    }
}
