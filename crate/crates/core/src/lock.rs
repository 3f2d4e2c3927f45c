//! Per-object FIFO locks local to the owning invoker.
//!
//! A caller takes a ticket synchronously when its request arrives and then
//! waits for that ticket to be served, so critical sections on one object
//! run in arrival order. Queues exist only while an object has waiters.
//! A ticket dropped before it is served is skipped.
//!
//! The table also accounts the time spent in the lock mechanism itself: for
//! each grant, the delay between the later of ticket issue and predecessor
//! release and the waiter resuming, plus the time taken by the release.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use hdrhistogram::Histogram;
use parking_lot::Mutex;
use thiserror::Error;
use tokio::sync::watch;

use crate::ids::ObjectId;

pub const DEFAULT_LOCK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LockError {
    #[error("lock on {0} not acquired within the timeout")]
    Timeout(ObjectId),
    #[error("re-entrant lock on {0}")]
    Reentrant(ObjectId),
}

struct Queue {
    next: u64,
    serving: u64,
    abandoned: BTreeSet<u64>,
    tx: watch::Sender<u64>,
    freed_at: Instant,
}

impl Queue {
    /// Serves the next ticket, skipping abandoned ones.
    fn advance(&mut self) {
        self.freed_at = Instant::now();
        self.serving += 1;
        while self.abandoned.remove(&self.serving) {
            self.serving += 1;
        }
        let _ = self.tx.send(self.serving);
    }

    fn idle(&self) -> bool {
        self.serving == self.next
    }
}

#[derive(Default)]
struct Inner {
    queues: HashMap<ObjectId, Queue>,
}

/// Per-grant costs in nanoseconds, up to a minute at 3 significant digits.
struct Costs(Histogram<u64>);

impl Default for Costs {
    fn default() -> Self {
        Costs(Histogram::new_with_bounds(1, 60_000_000_000, 3).expect("valid histogram bounds"))
    }
}

/// Lock-mechanism cost per grant since the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LockStats {
    pub grants: u64,
    pub mean: Duration,
    pub median: Duration,
    pub p99: Duration,
}

#[derive(Clone, Default)]
pub struct LockTable {
    inner: Arc<Mutex<Inner>>,
    costs: Arc<Mutex<Costs>>,
}

tokio::task_local! {
    static HELD: std::cell::RefCell<HashSet<ObjectId>>;
}

impl LockTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Takes the next ticket for `id`. Fails if the current task already
    /// holds the lock.
    pub fn ticket(&self, id: &ObjectId) -> Result<Ticket, LockError> {
        let held = HELD.try_with(|h| h.borrow().contains(id)).unwrap_or(false);
        if held {
            return Err(LockError::Reentrant(id.clone()));
        }
        let mut inner = self.inner.lock();
        let q = inner.queues.entry(id.clone()).or_insert_with(|| Queue {
            next: 0,
            serving: 0,
            abandoned: BTreeSet::new(),
            tx: watch::channel(0).0,
            freed_at: Instant::now(),
        });
        let n = q.next;
        q.next += 1;
        Ok(Ticket {
            table: self.clone(),
            id: id.clone(),
            n,
            rx: q.tx.subscribe(),
            acquired: false,
            issued: Instant::now(),
        })
    }

    pub fn stats(&self) -> LockStats {
        let costs = self.costs.lock();
        let h = &costs.0;
        if h.is_empty() {
            return LockStats::default();
        }
        LockStats {
            grants: h.len(),
            mean: Duration::from_nanos(h.mean() as u64),
            median: Duration::from_nanos(h.value_at_quantile(0.5)),
            p99: Duration::from_nanos(h.value_at_quantile(0.99)),
        }
    }

    pub fn reset_stats(&self) {
        self.costs.lock().0.reset();
    }

    fn record(&self, cost: Duration) {
        let ns = (cost.as_nanos() as u64).max(1);
        self.costs.lock().0.saturating_record(ns);
    }

    fn freed_at(&self, id: &ObjectId) -> Option<Instant> {
        self.inner.lock().queues.get(id).map(|q| q.freed_at)
    }

    /// Number of objects with a live queue.
    pub fn queued_objects(&self) -> usize {
        self.inner.lock().queues.len()
    }

    /// Runs `f` holding the lock on `id`, with re-entrance detection for the
    /// duration of `f`.
    pub async fn with_lock<F, T>(&self, id: &ObjectId, timeout: Duration, f: F) -> Result<T, LockError>
    where
        F: std::future::Future<Output = T>,
    {
        let ticket = self.ticket(id)?;
        self.hold(ticket, timeout, f).await
    }

    /// Waits for `ticket`, then runs `f` holding the lock.
    pub async fn hold<F, T>(&self, ticket: Ticket, timeout: Duration, f: F) -> Result<T, LockError>
    where
        F: std::future::Future<Output = T>,
    {
        let id = ticket.id.clone();
        let guard = ticket.acquire(timeout).await?;
        let mut held = HELD.try_with(|h| h.borrow().clone()).unwrap_or_default();
        held.insert(id);
        let out = HELD.scope(std::cell::RefCell::new(held), f).await;
        drop(guard);
        Ok(out)
    }

    fn release(&self, id: &ObjectId) {
        let mut inner = self.inner.lock();
        if let Some(q) = inner.queues.get_mut(id) {
            q.advance();
            if q.idle() {
                inner.queues.remove(id);
            }
        }
    }

    fn abandon(&self, id: &ObjectId, n: u64) {
        let mut inner = self.inner.lock();
        if let Some(q) = inner.queues.get_mut(id) {
            if q.serving == n {
                q.advance();
            } else {
                q.abandoned.insert(n);
            }
            if q.idle() {
                inner.queues.remove(id);
            }
        }
    }
}

/// A place in an object's queue.
pub struct Ticket {
    table: LockTable,
    id: ObjectId,
    n: u64,
    rx: watch::Receiver<u64>,
    acquired: bool,
    issued: Instant,
}

impl Ticket {
    pub fn number(&self) -> u64 {
        self.n
    }

    /// Waits until this ticket is served.
    pub async fn acquire(mut self, timeout: Duration) -> Result<LockGuard, LockError> {
        let n = self.n;
        let res = tokio::time::timeout(timeout, self.rx.wait_for(|s| *s == n)).await;
        match res {
            Ok(Ok(_)) => {
                self.acquired = true;
                let now = Instant::now();
                let ready = self.table.freed_at(&self.id).map_or(self.issued, |f| f.max(self.issued));
                Ok(LockGuard {
                    table: self.table.clone(),
                    id: self.id.clone(),
                    handoff: now.saturating_duration_since(ready),
                })
            }
            _ => Err(LockError::Timeout(self.id.clone())),
        }
    }
}

impl Drop for Ticket {
    fn drop(&mut self) {
        if !self.acquired {
            self.table.abandon(&self.id, self.n);
        }
    }
}

pub struct LockGuard {
    table: LockTable,
    id: ObjectId,
    handoff: Duration,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let start = Instant::now();
        self.table.release(&self.id);
        self.table.record(self.handoff + start.elapsed());
    }
}
