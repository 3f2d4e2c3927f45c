//! Deterministic fault-injection scenarios.
//!
//! A scenario creates counter objects, arms the given fault specs, submits a
//! seeded stream of async increments (some submitted twice), drains the log
//! while restarting crashed invokers and compares every counter with an
//! oracle that counts each distinct invocation id once.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use thiserror::Error;

use crate::cluster::{Cluster, ClusterError};
use crate::fault::FaultSpec;
use crate::error::InvalidId;
use crate::ids::{InvocationId, ObjectId};
use crate::invoker::{InvocationEnvelope, InvokeError};

/// Package that defines the counter class the workload drives.
pub const DEMO_PACKAGE: &str = include_str!("../fixtures/packages/demo.yaml");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cluster: {0}")]
    Cluster(#[from] ClusterError),
    #[error("invoke: {0}")]
    Invoke(#[from] InvokeError),
    #[error("id: {0}")]
    Id(#[from] InvalidId),
}

impl ScenarioError {
    /// Infrastructure failures, as opposed to a wrong final state.
    pub fn is_infra(&self) -> bool {
        !matches!(self, ScenarioError::Invoke(e) if !e.is_infra())
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub objects: usize,
    pub invocations: usize,
    /// Chance that a submission is repeated with the same invocation id.
    pub duplicate_rate: f64,
    pub seed: u64,
    pub class: String,
    pub binding: String,
}

impl Default for Workload {
    fn default() -> Self {
        Self {
            objects: 50,
            invocations: 1000,
            duplicate_rate: 0.1,
            seed: 7,
            class: "demo.counter".into(),
            binding: "increment".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub trace: Vec<String>,
    pub expected: BTreeMap<String, i64>,
    pub actual: BTreeMap<String, i64>,
    pub duplicates: usize,
    pub restarts: usize,
    pub elapsed: Duration,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.expected == self.actual
    }

    /// Objects whose counter differs from the oracle.
    pub fn mismatches(&self) -> Vec<(String, i64, i64)> {
        self.expected
            .iter()
            .filter_map(|(k, &want)| {
                let got = self.actual.get(k).copied().unwrap_or(0);
                (got != want).then(|| (k.clone(), want, got))
            })
            .collect()
    }
}

pub fn object_name(k: usize) -> String {
    format!("ctr-{k:03}")
}

/// Runs the workload against a cluster that already has the counter class.
pub async fn run(cluster: &Cluster, specs: Vec<FaultSpec>, w: &Workload) -> Result<ScenarioReport, ScenarioError> {
    let started = Instant::now();
    let objects = (0..w.objects)
        .map(|k| ObjectId::new(object_name(k)))
        .collect::<Result<Vec<_>, _>>()?;
    for o in &objects {
        let env = InvocationEnvelope::new(o.clone(), "new")
            .with_id(InvocationId::new(format!("new-{o}"))?)
            .with_class(w.class.clone());
        cluster.invoke(env).await?;
    }
    cluster.flush();
    cluster.faults().arm_all(specs);

    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let mut seen = BTreeSet::new();
    let mut expected: BTreeMap<String, i64> = objects.iter().map(|o| (o.to_string(), 0)).collect();
    let mut duplicates = 0;
    for i in 0..w.invocations {
        let o = &objects[rng.gen_range(0..objects.len())];
        let id = InvocationId::new(format!("inc-{i:05}"))?;
        let env = InvocationEnvelope::new(o.clone(), w.binding.clone()).with_id(id.clone());
        cluster.invoke_async(env.clone()).await?;
        if seen.insert(id) {
            *expected.entry(o.to_string()).or_default() += 1;
        }
        if w.duplicate_rate > 0.0 && rng.gen_bool(w.duplicate_rate) {
            cluster.faults().event(format!("resubmit inc-{i:05}"));
            cluster.invoke_async(env).await?;
            duplicates += 1;
        }
    }
    cluster.drain().await?;

    let mut actual = BTreeMap::new();
    for o in &objects {
        let rec = cluster.get(o).await?;
        actual.insert(o.to_string(), rec.doc.get("counter").and_then(Value::as_i64).unwrap_or(0));
    }
    Ok(ScenarioReport {
        trace: cluster.faults().trace(),
        expected,
        actual,
        duplicates,
        restarts: cluster.restarts(),
        elapsed: started.elapsed(),
    })
}
