//! In-memory data grid: object records partitioned across invokers by the
//! hash ring.
//!
//! Each invoker runs one [`GridNode`]. A node serves the records it owns from
//! memory, loading misses from the shared [`DocumentStore`]; a record owned
//! elsewhere is fetched from its owner in exactly one hop through a
//! [`GridTransport`]. Commits are compare-and-set on the revision and only
//! run on the owner. Committed records are written behind to the store by
//! [`GridNode::flush`] (driven by [`GridNode::spawn_flusher`]).
//!
//! Membership changes go through [`rebalance`], which freezes commits on
//! every node, hands moving records to their new owners, then activates the
//! new ring everywhere.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::Duration;

use async_trait::async_trait;
use dashmap::mapref::entry::Entry;
use dashmap::DashMap;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::{Notify, OwnedRwLockWriteGuard, RwLock as AsyncRwLock};

use crate::ids::{InvokerId, ObjectId};
use crate::record::ObjectRecord;
use crate::ring::{HashRing, Membership, RingError};
use crate::store::{DocumentStore, StoreError};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail", rename_all = "camelCase")]
pub enum GridError {
    #[error("object {0} not found")]
    NotFound(ObjectId),
    #[error("owner {0} unreachable")]
    OwnerUnreachable(InvokerId),
    #[error("revision conflict: expected {expected}, stored {actual}")]
    RevisionConflict { expected: u64, actual: u64 },
    #[error("not the owner; owner is {owner}")]
    NotOwner { owner: InvokerId },
    #[error("invalid commit: {0}")]
    InvalidCommit(String),
    #[error("persistent store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("hash ring has no members")]
    EmptyRing,
    #[error("migration timed out")]
    MigrationTimeout,
    #[error("migration failed: {0}")]
    Migration(String),
}

impl From<RingError> for GridError {
    fn from(_: RingError) -> Self {
        GridError::EmptyRing
    }
}

impl From<StoreError> for GridError {
    fn from(e: StoreError) -> Self {
        GridError::StoreUnavailable(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CommitResult {
    pub new_revision: u64,
}

/// A record handed to its new owner during rebalancing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MigratedRecord {
    pub record: ObjectRecord,
    pub dirty: bool,
}

/// Inter-node calls. Implementations: [`LocalGridTransport`] in process, an
/// HTTP client in the network crate.
#[async_trait]
pub trait GridTransport: Send + Sync {
    async fn fetch(&self, owner: &InvokerId, id: &ObjectId) -> Result<ObjectRecord, GridError>;

    async fn commit(
        &self,
        owner: &InvokerId,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
        durable: bool,
    ) -> Result<CommitResult, GridError>;

    async fn migrate(&self, to: &InvokerId, records: Vec<MigratedRecord>) -> Result<usize, GridError>;
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub flush_interval: Duration,
    pub flush_threshold: usize,
    pub migration_timeout: Duration,
    /// Keep every successful (object, revision) commit for inspection.
    pub record_commits: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            flush_interval: Duration::from_millis(50),
            flush_threshold: 256,
            migration_timeout: Duration::from_secs(30),
            record_commits: false,
        }
    }
}

struct ActiveRing {
    membership: Membership,
    ring: HashRing,
}

pub struct GridNode {
    id: InvokerId,
    config: GridConfig,
    active: RwLock<Arc<ActiveRing>>,
    memory: DashMap<ObjectId, ObjectRecord>,
    dirty: Mutex<BTreeSet<ObjectId>>,
    store: Arc<dyn DocumentStore>,
    transport: RwLock<Option<Arc<dyn GridTransport>>>,
    remote_hops: AtomicU64,
    commits: Mutex<Vec<(ObjectId, u64)>>,
    flush_wakeup: Arc<Notify>,
    gate: Arc<AsyncRwLock<()>>,
    freeze: Mutex<Option<(OwnedRwLockWriteGuard<()>, Membership)>>,
}

impl GridNode {
    pub fn new(
        id: InvokerId,
        membership: Membership,
        store: Arc<dyn DocumentStore>,
        config: GridConfig,
    ) -> Arc<Self> {
        let ring = membership.ring();
        Arc::new(Self {
            id,
            config,
            active: RwLock::new(Arc::new(ActiveRing { membership, ring })),
            memory: DashMap::new(),
            dirty: Mutex::new(BTreeSet::new()),
            store,
            transport: RwLock::new(None),
            remote_hops: AtomicU64::new(0),
            commits: Mutex::new(Vec::new()),
            flush_wakeup: Arc::new(Notify::new()),
            gate: Arc::new(AsyncRwLock::new(())),
            freeze: Mutex::new(None),
        })
    }

    pub fn set_transport(&self, transport: Arc<dyn GridTransport>) {
        *self.transport.write() = Some(transport);
    }

    pub fn id(&self) -> &InvokerId {
        &self.id
    }

    pub fn membership(&self) -> Membership {
        self.active.read().membership.clone()
    }

    pub fn store(&self) -> &Arc<dyn DocumentStore> {
        &self.store
    }

    pub fn owner_of(&self, id: &ObjectId) -> Result<InvokerId, GridError> {
        Ok(self.active.read().ring.owner_of(id.as_str())?.clone())
    }

    pub fn owns(&self, id: &ObjectId) -> bool {
        self.owner_of(id).is_ok_and(|o| o == self.id)
    }

    /// Remote fetches issued by this node so far.
    pub fn remote_hops(&self) -> u64 {
        self.remote_hops.load(Ordering::Relaxed)
    }

    pub fn commit_history(&self) -> Vec<(ObjectId, u64)> {
        self.commits.lock().clone()
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty.lock().len()
    }

    /// Snapshot of every record resident in memory.
    pub fn resident(&self) -> Vec<ObjectRecord> {
        self.memory.iter().map(|e| e.value().clone()).collect()
    }

    fn transport(&self) -> Result<Arc<dyn GridTransport>, GridError> {
        self.transport
            .read()
            .clone()
            .ok_or_else(|| GridError::Migration("no grid transport configured".into()))
    }

    /// Snapshot of an object, from memory if this node owns it, otherwise
    /// from the owner in one hop.
    pub async fn get(&self, id: &ObjectId) -> Result<ObjectRecord, GridError> {
        let owner = self.owner_of(id)?;
        if owner == self.id {
            return self.load_owned(id);
        }
        self.remote_hops.fetch_add(1, Ordering::Relaxed);
        self.transport()?.fetch(&owner, id).await
    }

    /// Serves a fetch for an object this node owns.
    pub fn local_get(&self, id: &ObjectId) -> Result<ObjectRecord, GridError> {
        let owner = self.owner_of(id)?;
        if owner != self.id {
            return Err(GridError::NotOwner { owner });
        }
        self.load_owned(id)
    }

    fn load_owned(&self, id: &ObjectId) -> Result<ObjectRecord, GridError> {
        if let Some(r) = self.memory.get(id) {
            return Ok(r.clone());
        }
        match self.store.get(id)? {
            Some(rec) => Ok(self
                .memory
                .entry(id.clone())
                .or_insert(rec)
                .value()
                .clone()),
            None => Err(GridError::NotFound(id.clone())),
        }
    }

    /// Compare-and-set commit on the owner: succeeds iff the current revision
    /// equals `expected_revision` (0 for an object that does not exist yet).
    pub async fn commit(
        &self,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
    ) -> Result<CommitResult, GridError> {
        self.commit_with(id, expected_revision, record, false).await
    }

    /// Like [`commit`](Self::commit); a durable commit is also written
    /// through to the store before it returns.
    pub async fn commit_with(
        &self,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
        durable: bool,
    ) -> Result<CommitResult, GridError> {
        let res = self.commit_inner(id, expected_revision, record).await?;
        if durable {
            self.persist(id)?;
        }
        Ok(res)
    }

    async fn commit_inner(
        &self,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
    ) -> Result<CommitResult, GridError> {
        let _open = self.gate.read().await;
        let owner = self.owner_of(id)?;
        if owner != self.id {
            return Err(GridError::NotOwner { owner });
        }
        if record.id != *id {
            return Err(GridError::InvalidCommit(format!(
                "record id {} does not match {id}",
                record.id
            )));
        }
        if record.revision != expected_revision + 1 {
            return Err(GridError::InvalidCommit(format!(
                "new revision {} must be expected {expected_revision} + 1",
                record.revision
            )));
        }
        // The stored fallback is read before taking the entry lock.
        let stored = if self.memory.contains_key(id) {
            None
        } else {
            self.store.get(id)?
        };
        match self.memory.entry(id.clone()) {
            Entry::Occupied(mut e) => {
                let actual = e.get().revision;
                if actual != expected_revision {
                    return Err(GridError::RevisionConflict {
                        expected: expected_revision,
                        actual,
                    });
                }
                e.insert(record);
            }
            Entry::Vacant(e) => {
                let actual = stored.map_or(0, |r| r.revision);
                if actual != expected_revision {
                    return Err(GridError::RevisionConflict {
                        expected: expected_revision,
                        actual,
                    });
                }
                e.insert(record);
            }
        }
        let new_revision = expected_revision + 1;
        if self.config.record_commits {
            self.commits.lock().push((id.clone(), new_revision));
        }
        let dirty = {
            let mut d = self.dirty.lock();
            d.insert(id.clone());
            d.len()
        };
        if dirty >= self.config.flush_threshold {
            self.flush_wakeup.notify_one();
        }
        Ok(CommitResult { new_revision })
    }

    /// Commit on whichever node owns `id`.
    pub async fn commit_routed(
        &self,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
    ) -> Result<CommitResult, GridError> {
        self.commit_routed_with(id, expected_revision, record, false).await
    }

    pub async fn commit_routed_with(
        &self,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
        durable: bool,
    ) -> Result<CommitResult, GridError> {
        let owner = self.owner_of(id)?;
        if owner == self.id {
            self.commit_with(id, expected_revision, record, durable).await
        } else {
            self.transport()?
                .commit(&owner, id, expected_revision, record, durable)
                .await
        }
    }

    /// Writes every dirty record to the store in one batch. Repeated commits
    /// to one object between flushes coalesce into a single write. On store
    /// failure the dirty set is retained.
    pub fn flush(&self) -> Result<usize, GridError> {
        let ids: Vec<ObjectId> = std::mem::take(&mut *self.dirty.lock())
            .into_iter()
            .collect();
        if ids.is_empty() {
            return Ok(0);
        }
        let batch: Vec<ObjectRecord> = ids
            .iter()
            .filter_map(|id| self.memory.get(id).map(|r| r.clone()))
            .collect();
        match self.store.put_batch(&batch) {
            Ok(n) => Ok(n),
            Err(e) => {
                self.dirty.lock().extend(ids);
                Err(e.into())
            }
        }
    }

    /// Writes one object through to the store now.
    pub fn persist(&self, id: &ObjectId) -> Result<(), GridError> {
        let was_dirty = self.dirty.lock().remove(id);
        let Some(rec) = self.memory.get(id).map(|r| r.clone()) else {
            return Ok(());
        };
        if let Err(e) = self.store.put_batch(&[rec]) {
            if was_dirty {
                self.dirty.lock().insert(id.clone());
            }
            return Err(e.into());
        }
        Ok(())
    }

    /// Background write-behind loop: flushes every `flush_interval`, or
    /// sooner once `flush_threshold` records are dirty. Stops when the node
    /// is dropped.
    pub fn spawn_flusher(self: &Arc<Self>) -> tokio::task::JoinHandle<()> {
        let weak: Weak<Self> = Arc::downgrade(self);
        let wakeup = self.flush_wakeup.clone();
        let interval = self.config.flush_interval;
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    _ = tokio::time::sleep(interval) => {}
                    _ = wakeup.notified() => {}
                }
                let Some(node) = weak.upgrade() else { break };
                if let Err(e) = node.flush() {
                    tracing::warn!(node = %node.id, error = %e, "write-behind flush failed; will retry");
                }
            }
        })
    }

    /// Installs records handed over by their previous owner. A record only
    /// replaces a resident copy with a lower revision.
    pub fn accept_migration(&self, records: Vec<MigratedRecord>) -> usize {
        let mut n = 0;
        for m in records {
            let id = m.record.id.clone();
            let installed = match self.memory.entry(id.clone()) {
                Entry::Occupied(mut e) => {
                    if e.get().revision < m.record.revision {
                        e.insert(m.record);
                        true
                    } else {
                        false
                    }
                }
                Entry::Vacant(e) => {
                    e.insert(m.record);
                    true
                }
            };
            if installed {
                n += 1;
                if m.dirty {
                    self.dirty.lock().insert(id);
                }
            }
        }
        n
    }

    /// First rebalance phase: blocks commits, writes moving records through
    /// to the store and hands them to their new owners. Gets keep being
    /// served under the old ring.
    async fn prepare_migration(
        &self,
        next: &Membership,
    ) -> Result<Vec<(InvokerId, usize)>, GridError> {
        let guard = self.gate.clone().write_owned().await;
        let new_ring = next.ring();
        let mut outgoing: BTreeMap<InvokerId, Vec<MigratedRecord>> = BTreeMap::new();
        let dirty: HashSet<ObjectId> = self.dirty.lock().iter().cloned().collect();
        for entry in self.memory.iter() {
            let new_owner = new_ring.owner_of(entry.key().as_str())?;
            if *new_owner != self.id {
                outgoing
                    .entry(new_owner.clone())
                    .or_default()
                    .push(MigratedRecord {
                        record: entry.value().clone(),
                        dirty: dirty.contains(entry.key()),
                    });
            }
        }
        let moving: Vec<ObjectRecord> = outgoing
            .values()
            .flatten()
            .filter(|m| m.dirty)
            .map(|m| m.record.clone())
            .collect();
        if !moving.is_empty() {
            self.store.put_batch(&moving)?;
            let mut d = self.dirty.lock();
            for r in &moving {
                d.remove(&r.id);
            }
        }
        let transport = if outgoing.is_empty() {
            None
        } else {
            Some(self.transport()?)
        };
        let mut report = Vec::new();
        for (to, mut records) in outgoing {
            for r in &mut records {
                r.dirty = false;
            }
            let n = records.len();
            let call = transport.as_ref().unwrap().migrate(&to, records);
            match tokio::time::timeout(self.config.migration_timeout, call).await {
                Ok(Ok(_)) => report.push((to, n)),
                Ok(Err(e)) => return Err(e),
                Err(_) => return Err(GridError::MigrationTimeout),
            }
        }
        *self.freeze.lock() = Some((guard, next.clone()));
        Ok(report)
    }

    /// Second rebalance phase: switch to the prepared ring, evict records
    /// this node no longer owns, and reopen commits.
    fn activate_prepared(&self) {
        let Some((guard, next)) = self.freeze.lock().take() else {
            return;
        };
        let ring = next.ring();
        self.memory
            .retain(|id, _| ring.owner_of(id.as_str()).is_ok_and(|o| *o == self.id));
        *self.active.write() = Arc::new(ActiveRing {
            membership: next,
            ring,
        });
        drop(guard);
    }

    fn abort_prepared(&self) {
        self.freeze.lock().take();
    }

    /// Replaces the active ring without moving data. For nodes that join
    /// empty or for routers.
    pub fn install_membership(&self, membership: Membership) {
        let ring = membership.ring();
        *self.active.write() = Arc::new(ActiveRing { membership, ring });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MigrationReport {
    pub epoch: u64,
    /// (from, to, records moved)
    pub transfers: Vec<(InvokerId, InvokerId, usize)>,
    pub total_moved: usize,
}

/// Moves the cluster to `next`. `nodes` must contain every node of the old
/// and the new membership. All nodes first hand over moving records with
/// commits frozen; only then does any node activate the new ring, so a new
/// owner never serves a key before receiving it.
pub async fn rebalance(
    nodes: &[Arc<GridNode>],
    next: Membership,
) -> Result<MigrationReport, GridError> {
    if next.members.is_empty() {
        return Err(GridError::EmptyRing);
    }
    let mut report = MigrationReport {
        epoch: next.epoch,
        ..Default::default()
    };
    let unchanged = nodes.iter().all(|n| {
        let cur = n.membership();
        cur.members.iter().collect::<BTreeSet<_>>() == next.members.iter().collect::<BTreeSet<_>>()
            && cur.vnodes_per_member == next.vnodes_per_member
    });
    if unchanged {
        return Ok(report);
    }
    for (i, node) in nodes.iter().enumerate() {
        match node.prepare_migration(&next).await {
            Ok(moves) => {
                for (to, n) in moves {
                    report.total_moved += n;
                    report.transfers.push((node.id.clone(), to, n));
                }
            }
            Err(e) => {
                for n in &nodes[..i] {
                    n.abort_prepared();
                }
                return Err(e);
            }
        }
    }
    for node in nodes {
        node.activate_prepared();
    }
    Ok(report)
}

/// In-process transport: calls peer nodes directly. Peers can be marked
/// down to simulate unreachable owners.
#[derive(Default)]
pub struct LocalGridTransport {
    nodes: RwLock<HashMap<InvokerId, Weak<GridNode>>>,
    down: RwLock<HashSet<InvokerId>>,
}

impl LocalGridTransport {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, node: &Arc<GridNode>) {
        self.nodes
            .write()
            .insert(node.id().clone(), Arc::downgrade(node));
    }

    pub fn set_down(&self, id: &InvokerId, down: bool) {
        if down {
            self.down.write().insert(id.clone());
        } else {
            self.down.write().remove(id);
        }
    }

    fn peer(&self, id: &InvokerId) -> Result<Arc<GridNode>, GridError> {
        if self.down.read().contains(id) {
            return Err(GridError::OwnerUnreachable(id.clone()));
        }
        self.nodes
            .read()
            .get(id)
            .and_then(Weak::upgrade)
            .ok_or_else(|| GridError::OwnerUnreachable(id.clone()))
    }
}

#[async_trait]
impl GridTransport for LocalGridTransport {
    async fn fetch(&self, owner: &InvokerId, id: &ObjectId) -> Result<ObjectRecord, GridError> {
        self.peer(owner)?.local_get(id)
    }

    async fn commit(
        &self,
        owner: &InvokerId,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
        durable: bool,
    ) -> Result<CommitResult, GridError> {
        self.peer(owner)?
            .commit_with(id, expected_revision, record, durable)
            .await
    }

    async fn migrate(&self, to: &InvokerId, records: Vec<MigratedRecord>) -> Result<usize, GridError> {
        Ok(self.peer(to)?.accept_migration(records))
    }
}
