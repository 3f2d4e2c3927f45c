#![allow(dead_code)]

use std::sync::Arc;

use oprc_core::cluster::{Cluster, ClusterConfig};
use oprc_core::ids::{InvocationId, ObjectId};
use oprc_core::invoker::InvocationEnvelope;
use oprc_core::log::LogConfig;

pub const DEMO: &str = include_str!("../../fixtures/packages/demo.yaml");
pub const MEDIA: &str = include_str!("../../fixtures/packages/media.yaml");

pub fn oid(s: &str) -> ObjectId {
    ObjectId::new(s).unwrap()
}

pub fn iid(s: &str) -> InvocationId {
    InvocationId::new(s).unwrap()
}

pub fn config(n: usize, dir: &std::path::Path) -> ClusterConfig {
    let mut c = ClusterConfig::new(n, dir);
    c.log = LogConfig {
        fsync: false,
        ..LogConfig::default()
    };
    c
}

pub async fn cluster(n: usize, dir: &std::path::Path) -> Arc<Cluster> {
    let c = Cluster::start(config(n, dir)).unwrap();
    c.apply(DEMO).await.unwrap();
    c.apply(MEDIA).await.unwrap();
    c
}

pub fn call(obj: &str, binding: &str, inv: &str) -> InvocationEnvelope {
    InvocationEnvelope::new(oid(obj), binding).with_id(iid(inv))
}

pub async fn create(c: &Cluster, obj: &str, class: &str) {
    c.invoke(call(obj, "new", &format!("new-{obj}")).with_class(class))
        .await
        .unwrap();
}
