use std::sync::Arc;
use std::time::Duration;

use oprc_core::ids::{InvocationId, ObjectId};
use oprc_core::ingress::Ingress;
use oprc_core::invoker::{InvocationEnvelope, InvocationStatus, InvokeError};
use oprc_core::ring::Membership;
use oprc_net::client::{ClientError, HttpRouter, OprcClient, PeerTable};
use oprc_net::harness::{url, HarnessError, HttpCluster, HttpClusterConfig};
use oprc_net::wire::InvokeRequest;
use serde_json::json;

const DEMO: &str = include_str!("../../core/fixtures/packages/demo.yaml");
const MEDIA: &str = include_str!("../../core/fixtures/packages/media.yaml");

async fn up(n: usize, base: u16, dir: &std::path::Path) -> HttpCluster {
    let mut c = HttpClusterConfig::new(n, base, dir);
    c.log.fsync = false;
    let cluster = HttpCluster::up(c).await.unwrap();
    let client = cluster.client();
    client.apply_package(DEMO).await.unwrap();
    client.apply_package(MEDIA).await.unwrap();
    cluster
}

fn req(id: &str) -> InvokeRequest {
    InvokeRequest {
        invocation_id: Some(InvocationId::new(id).unwrap()),
        ..Default::default()
    }
}

async fn healthy(u: &str) -> bool {
    matches!(reqwest::get(format!("{u}/healthz")).await, Ok(r) if r.status().is_success())
}

#[tokio::test]
async fn single_invoker_cluster_is_healthy_and_double_down_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(1, 18100, dir.path()).await;
    for u in [c.control_url(), c.ingress_url(), c.gateway_url(), c.invoker_url(0)] {
        assert!(healthy(&u).await, "{u}");
    }
    assert_eq!(c.client().health().await.unwrap()["status"], "ok");
    c.down().await;
    c.down().await;
    assert!(!healthy(&c.ingress_url()).await);
}

#[tokio::test]
async fn busy_port_fails_start() {
    let dir = tempfile::tempdir().unwrap();
    let _held = std::net::TcpListener::bind("127.0.0.1:18202").unwrap();
    let err = HttpCluster::up(HttpClusterConfig::new(1, 18200, dir.path())).await.err().unwrap();
    assert!(matches!(err, HarnessError::PortInUse(18202)), "{err}");
}

#[tokio::test]
async fn requests_land_on_the_owner() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(3, 18300, dir.path()).await;
    let client = c.client();
    let ring = c.membership().ring();
    for i in 0..300 {
        let obj = format!("obj-{i}");
        let mut r = req(&format!("new-{i}"));
        r.class_ref = Some("demo.counter".into());
        let res = client.invoke(&obj, "new", &r).await.unwrap();
        assert_eq!(res.served_by.as_ref(), Some(ring.owner_of(&obj).unwrap()));
    }
    // a kill is visible as degraded membership
    c.kill(1).unwrap();
    let h = client.health().await.unwrap();
    assert_eq!(h["status"], "degraded");
    assert_eq!(h["members"][1]["up"], false);
    c.down().await;
}

#[tokio::test]
async fn files_round_trip_through_the_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(2, 18400, dir.path()).await;
    let client = c.client();
    let mut r = req("mk");
    r.class_ref = Some("demo.text".into());
    client.invoke("t1", "new", &r).await.unwrap();
    for (i, text) in ["ab", "cd", "ef"].iter().enumerate() {
        let mut r = req(&format!("w{i}"));
        r.args.insert("text".into(), text.to_string());
        client.invoke("t1", "concat", &r).await.unwrap();
    }
    // read back via redirect with a fresh task token
    let gw = c.deps().gateway.clone();
    let inv = InvocationId::new("reader").unwrap();
    let token = gw.mint_task_token(&inv, &ObjectId::new("t1").unwrap(), 60);
    let raw = reqwest::Client::builder()
        .redirect(reqwest::redirect::Policy::none())
        .build()
        .unwrap();
    let resp = raw
        .get(format!("{}/storage/t1/file", c.gateway_url()))
        .bearer_auth(&token)
        .header("x-oprc-invocation", "reader")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 307);
    let location = resp.headers()["location"].to_str().unwrap().to_string();
    assert!(location.starts_with(&format!("{}/blob/objects/t1/file/w2-file?", c.gateway_url())), "{location}");
    assert_eq!(raw.get(&location).send().await.unwrap().bytes().await.unwrap(), "abcdef");

    // a token minted for another invocation is refused
    let resp = raw
        .get(format!("{}/storage/t1/file", c.gateway_url()))
        .bearer_auth(&token)
        .header("x-oprc-invocation", "someone-else")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), 401);
    c.down().await;
}

#[tokio::test]
async fn async_calls_complete_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(3, 18500, dir.path()).await;
    let client = c.client();
    let mut r = req("mk");
    r.class_ref = Some("demo.counter".into());
    client.invoke("c1", "new", &r).await.unwrap();
    for i in 0..20 {
        client.invoke_async("c1", "increment", &req(&format!("a{i}"))).await.unwrap();
    }
    let deadline = tokio::time::Instant::now() + Duration::from_secs(20);
    loop {
        let done = futures_done(&client, 20).await;
        if done {
            break;
        }
        assert!(tokio::time::Instant::now() < deadline, "async calls did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    let got = client.invoke("c1", "get", &req("g")).await.unwrap();
    assert_eq!(got.return_doc.unwrap()["doc"], json!({"counter": 20}));
    match client.result("nope").await {
        Err(ClientError::Invoke(InvokeError::NotFound(_))) => {}
        other => panic!("{other:?}"),
    }
    c.down().await;
}

async fn futures_done(client: &OprcClient, n: usize) -> bool {
    for i in 0..n {
        match client.result(&format!("a{i}")).await {
            Ok(r) if r.status == InvocationStatus::Done => {}
            _ => return false,
        }
    }
    true
}

#[tokio::test]
async fn dataflow_runs_across_invokers_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(3, 18600, dir.path()).await;
    let client = c.client();
    let mut r = req("mk");
    r.class_ref = Some("media.video".into());
    client.invoke("v1", "new", &r).await.unwrap();
    let mut r = req("run");
    r.args.insert("n".into(), "5".into());
    let res = client.invoke("v1", "pipeline", &r).await.unwrap();
    assert_eq!(res.status, InvocationStatus::Done);
    let report = client.invoke("run-s2-out", "get", &req("g")).await.unwrap();
    assert_eq!(report.return_doc.unwrap()["doc"]["segments"], 5);
    // the run reports its steps
    let stored = client.result("run").await.unwrap();
    assert_eq!(stored.steps.unwrap().len(), 3);
    c.down().await;
}

#[tokio::test]
async fn stale_ingress_retries_once_at_the_owner() {
    let dir = tempfile::tempdir().unwrap();
    let c = up(3, 18700, dir.path()).await;
    let peers = Arc::new(PeerTable::new());
    for i in 0..3 {
        peers.set(oprc_core::cluster::invoker_id(i), c.invoker_url(i));
    }
    // this ingress believes inv-0 owns everything
    let stale = Ingress::new(
        Arc::new(HttpRouter::new(peers)),
        c.deps().results.clone(),
        Membership::new(0, vec![oprc_core::cluster::invoker_id(0)]),
    );
    let ring = c.membership().ring();
    let mut redirected = 0;
    for i in 0..30 {
        let obj = format!("s{i}");
        let env = InvocationEnvelope::new(ObjectId::new(&obj).unwrap(), "new").with_class("demo.counter");
        let res = stale.invoke(env).await.unwrap();
        let owner = ring.owner_of(&obj).unwrap();
        assert_eq!(res.served_by.as_ref(), Some(owner));
        if owner.as_str() != "inv-0" {
            redirected += 1;
        }
    }
    assert!(redirected > 0);
    assert_eq!(url(c.ports().control()), c.control_url());
    c.down().await;
}
