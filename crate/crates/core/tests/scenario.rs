mod common;

use oprc_core::cluster::Cluster;
use oprc_core::fault::{parse_scenario, FaultPoint};
use oprc_core::scenario::{run, Workload};

use common::{config, DEMO};

const CHAOS: &str = include_str!("../fixtures/scenarios/chaos.yaml");

async fn chaos_run(dir: &std::path::Path, w: &Workload) -> oprc_core::scenario::ScenarioReport {
    let c = Cluster::start(config(3, dir)).unwrap();
    c.apply(DEMO).await.unwrap();
    let report = run(&c, parse_scenario(CHAOS).unwrap(), w).await.unwrap();
    assert_eq!(c.faults().fired(FaultPoint::AfterCommitBeforeAck), report.restarts);
    report
}

fn small() -> Workload {
    Workload {
        objects: 10,
        invocations: 200,
        ..Workload::default()
    }
}

#[tokio::test(flavor = "current_thread")]
async fn counters_match_the_dedup_oracle_under_faults() {
    let dir = tempfile::tempdir().unwrap();
    let r = chaos_run(dir.path(), &small()).await;
    assert!(r.passed(), "mismatches: {:?}", r.mismatches());
    assert!(r.restarts > 0);
    assert!(r.duplicates > 0);
    assert_eq!(r.expected.values().sum::<i64>(), 200);
}

#[tokio::test(flavor = "current_thread")]
async fn same_seed_gives_the_same_trace() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = chaos_run(a.path(), &small()).await;
    let second = chaos_run(b.path(), &small()).await;
    assert!(!first.trace.is_empty());
    assert_eq!(first.trace, second.trace);
}

#[tokio::test(flavor = "current_thread")]
async fn no_faults_is_a_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let c = Cluster::start(config(2, dir.path())).unwrap();
    c.apply(DEMO).await.unwrap();
    let r = run(&c, Vec::new(), &small()).await.unwrap();
    assert!(r.passed());
    assert_eq!(r.restarts, 0);
    assert!(r.trace.iter().all(|l| l.starts_with("resubmit")));
}
