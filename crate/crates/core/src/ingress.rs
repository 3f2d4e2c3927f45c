//! Ingress: routes client calls to the owner of the target object.
//!
//! The ingress keeps its own copy of the ring. When membership moved under
//! it the first invoker answers `NotOwner` with the current owner and the
//! call is retried there once.

use std::sync::Arc;

use parking_lot::RwLock;

use crate::ids::{InvocationId, InvokerId, ObjectId};
use crate::invoker::{InvocationEnvelope, InvocationResult, InvokeError, InvokerRouter, ResultStore};
use crate::ring::{HashRing, Membership};

pub struct Ingress {
    router: Arc<dyn InvokerRouter>,
    results: Arc<ResultStore>,
    view: RwLock<(Membership, HashRing)>,
}

impl Ingress {
    pub fn new(router: Arc<dyn InvokerRouter>, results: Arc<ResultStore>, membership: Membership) -> Self {
        let ring = membership.ring();
        Self {
            router,
            results,
            view: RwLock::new((membership, ring)),
        }
    }

    pub fn membership(&self) -> Membership {
        self.view.read().0.clone()
    }

    pub fn ring(&self) -> HashRing {
        self.view.read().1.clone()
    }

    pub fn set_membership(&self, m: Membership) {
        let ring = m.ring();
        *self.view.write() = (m, ring);
    }

    pub fn owner_of(&self, id: &ObjectId) -> Result<InvokerId, InvokeError> {
        self.view
            .read()
            .1
            .owner_of(id.as_str())
            .cloned()
            .map_err(|e| InvokeError::Grid(e.to_string()))
    }

    /// Synchronous invocation.
    pub async fn invoke(&self, env: InvocationEnvelope) -> Result<InvocationResult, InvokeError> {
        let owner = self.owner_of(&env.target_object_id)?;
        match self.router.route(&owner, env.clone()).await {
            Err(InvokeError::NotOwner { owner }) => {
                tracing::debug!(%owner, "stale ring at ingress; retrying at owner");
                self.router.route(&owner, env).await
            }
            other => other,
        }
    }

    /// Asynchronous invocation: returns once the call is durably queued.
    pub async fn invoke_async(&self, env: InvocationEnvelope) -> Result<InvocationId, InvokeError> {
        let owner = self.owner_of(&env.target_object_id)?;
        match self.router.submit(&owner, env.clone()).await {
            Err(InvokeError::NotOwner { owner }) => self.router.submit(&owner, env).await,
            other => other,
        }
    }

    pub fn result(&self, id: &InvocationId) -> Option<InvocationResult> {
        self.results.get(id)
    }
}
