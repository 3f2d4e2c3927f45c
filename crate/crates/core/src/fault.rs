//! Deterministic fault injection.
//!
//! Fault points are named hooks compiled into the invoker and message-log
//! consumer. A [`FaultSpec`] arms a point for a number of matching hits;
//! probabilistic specs draw from a seeded ChaCha RNG, so one seed and one
//! scenario always fire the same faults in the same order. Every firing is
//! appended to an event trace.

use std::fmt;
use std::str::FromStr;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FaultPoint {
    /// Files are uploaded but the metadata commit never happens.
    BeforePhase2Commit,
    /// The commit happened but the log entry is not acknowledged.
    AfterCommitBeforeAck,
    /// A log entry is delivered a second time.
    DuplicateDelivery,
    /// The engine's completion is lost in transit.
    DropCompletion,
    /// Invoker `i` crashes at its next check.
    CrashInvoker(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("unknown fault point {0:?}")]
    UnknownFaultPoint(String),
    #[error("bad scenario: {0}")]
    BadScenario(String),
}

impl FromStr for FaultPoint {
    type Err = FaultError;
    fn from_str(s: &str) -> Result<Self, FaultError> {
        Ok(match s {
            "BEFORE_PHASE2_COMMIT" => FaultPoint::BeforePhase2Commit,
            "AFTER_COMMIT_BEFORE_ACK" => FaultPoint::AfterCommitBeforeAck,
            "DUPLICATE_DELIVERY" => FaultPoint::DuplicateDelivery,
            "DROP_COMPLETION" => FaultPoint::DropCompletion,
            _ => {
                let i = s
                    .strip_prefix("CRASH_INVOKER(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| FaultError::UnknownFaultPoint(s.to_string()))?;
                FaultPoint::CrashInvoker(i)
            }
        })
    }
}

impl TryFrom<String> for FaultPoint {
    type Error = FaultError;
    fn try_from(s: String) -> Result<Self, FaultError> {
        s.parse()
    }
}

impl From<FaultPoint> for String {
    fn from(p: FaultPoint) -> String {
        p.to_string()
    }
}

impl fmt::Display for FaultPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultPoint::BeforePhase2Commit => f.write_str("BEFORE_PHASE2_COMMIT"),
            FaultPoint::AfterCommitBeforeAck => f.write_str("AFTER_COMMIT_BEFORE_ACK"),
            FaultPoint::DuplicateDelivery => f.write_str("DUPLICATE_DELIVERY"),
            FaultPoint::DropCompletion => f.write_str("DROP_COMPLETION"),
            FaultPoint::CrashInvoker(i) => write!(f, "CRASH_INVOKER({i})"),
        }
    }
}

/// Invocation filter. Each present field must match; a value ending in `*`
/// matches by prefix and `*` alone matches anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FaultMatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
}

fn glob(pattern: &Option<String>, value: Option<&str>) -> bool {
    match pattern.as_deref() {
        None | Some("*") => true,
        Some(p) => match (p.strip_suffix('*'), value) {
            (_, None) => false,
            (Some(prefix), Some(v)) => v.starts_with(prefix),
            (None, Some(v)) => v == p,
        },
    }
}

impl FaultMatch {
    fn matches(&self, ctx: &FaultCtx<'_>) -> bool {
        glob(&self.invocation, ctx.invocation) && glob(&self.object, ctx.object) && glob(&self.binding, ctx.binding)
    }
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FaultSpec {
    pub at: FaultPoint,
    #[serde(default, rename = "match")]
    pub matcher: FaultMatch,
    /// Number of times the fault fires.
    #[serde(default = "one")]
    pub count: u64,
    /// Chance that a matching hit fires; 1 when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

impl FaultSpec {
    pub fn once(at: FaultPoint) -> Self {
        Self {
            at,
            matcher: FaultMatch::default(),
            count: 1,
            probability: None,
        }
    }

    pub fn times(at: FaultPoint, count: u64) -> Self {
        Self {
            count,
            ..Self::once(at)
        }
    }

    pub fn matching(mut self, m: FaultMatch) -> Self {
        self.matcher = m;
        self
    }

    pub fn with_probability(mut self, p: f64) -> Self {
        self.probability = Some(p);
        self
    }
}

/// Parses a scenario file: a YAML list of fault specs.
pub fn parse_scenario(text: &str) -> Result<Vec<FaultSpec>, FaultError> {
    let specs: Vec<FaultSpec> = serde_yaml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        match msg.find("unknown fault point") {
            Some(_) => FaultError::UnknownFaultPoint(msg),
            None => FaultError::BadScenario(msg),
        }
    })?;
    for s in &specs {
        if let Some(p) = s.probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(FaultError::BadScenario(format!("probability {p} outside [0, 1]")));
            }
        }
    }
    Ok(specs)
}

/// Where a fault check happens.
#[derive(Debug, Clone, Copy, Default)]
pub struct FaultCtx<'a> {
    pub invoker: Option<u32>,
    pub invocation: Option<&'a str>,
    pub object: Option<&'a str>,
    pub binding: Option<&'a str>,
}

struct Armed {
    spec: FaultSpec,
    remaining: u64,
}

pub struct FaultInjector {
    armed: Mutex<Vec<Armed>>,
    rng: Mutex<ChaCha8Rng>,
    trace: Mutex<Vec<String>>,
}

impl FaultInjector {
    pub fn new(seed: u64) -> Self {
        Self {
            armed: Mutex::new(Vec::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            trace: Mutex::new(Vec::new()),
        }
    }

    pub fn arm(&self, spec: FaultSpec) {
        let remaining = spec.count;
        self.armed.lock().push(Armed { spec, remaining });
    }

    pub fn arm_all(&self, specs: impl IntoIterator<Item = FaultSpec>) {
        for s in specs {
            self.arm(s);
        }
    }

    pub fn disarm_all(&self) {
        self.armed.lock().clear();
    }

    /// Hits left across armed specs for `point`.
    pub fn remaining(&self, point: FaultPoint) -> u64 {
        self.armed
            .lock()
            .iter()
            .filter(|a| a.spec.at == point)
            .map(|a| a.remaining)
            .sum()
    }

    /// Returns true if an armed fault fires here. Consumes one hit.
    pub fn fire(&self, point: FaultPoint, ctx: FaultCtx<'_>) -> bool {
        let mut armed = self.armed.lock();
        if armed.is_empty() {
            return false;
        }
        for a in armed.iter_mut() {
            if a.remaining == 0 || a.spec.at != point || !a.spec.matcher.matches(&ctx) {
                continue;
            }
            if let FaultPoint::CrashInvoker(i) = point {
                if ctx.invoker != Some(i) {
                    continue;
                }
            }
            if let Some(p) = a.spec.probability {
                if !self.rng.lock().gen_bool(p) {
                    continue;
                }
            }
            a.remaining -= 1;
            drop(armed);
            self.event(format!(
                "fault {point} invocation={} object={}",
                ctx.invocation.unwrap_or("-"),
                ctx.object.unwrap_or("-")
            ));
            return true;
        }
        false
    }

    /// Draws from the seeded RNG (used by probabilistic workload choices).
    pub fn roll(&self, p: f64) -> bool {
        self.rng.lock().gen_bool(p)
    }

    pub fn event(&self, line: impl Into<String>) {
        self.trace.lock().push(line.into());
    }

    pub fn trace(&self) -> Vec<String> {
        self.trace.lock().clone()
    }

    pub fn fired(&self, point: FaultPoint) -> usize {
        let prefix = format!("fault {point} ");
        self.trace.lock().iter().filter(|l| l.starts_with(&prefix)).count()
    }
}

impl Default for FaultInjector {
    fn default() -> Self {
        Self::new(0)
    }
}
