//! HTTP surfaces: invoker (with the grid protocol), storage gateway,
//! control plane and ingress.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use oprc_core::grid::{GridError, MigratedRecord};
use oprc_core::ids::{InvocationId, ObjectId};
use oprc_core::ingress::Ingress;
use oprc_core::invoker::{InvokeError, Invoker, Mode, ResultStore};
use oprc_core::record::ObjectRecord;
use oprc_core::registry::Registry;
use oprc_core::ring::Membership;
use oprc_core::storage::{Gateway, Method, PresignedUrl};

use crate::client::PeerTable;
use crate::wire::{
    error_response, gateway_status, registry_status, Accepted, AllocateRequest, GridFailure, InvokeFailure,
    InvokeRequest, DURABLE, EXPECTED_REVISION, INVOCATION,
};

const BLOB_LIMIT: usize = 256 * 1024 * 1024;

fn object_id(s: &str) -> Result<ObjectId, Response> {
    ObjectId::new(s).map_err(|e| error_response(StatusCode::BAD_REQUEST, "invalidId", e.to_string()))
}

fn invocation_id(s: &str) -> Result<InvocationId, Response> {
    InvocationId::new(s).map_err(|e| error_response(StatusCode::BAD_REQUEST, "invalidId", e.to_string()))
}

fn result_of(results: &ResultStore, id: &str) -> Response {
    let id = match invocation_id(id) {
        Ok(i) => i,
        Err(r) => return r,
    };
    match results.get(&id) {
        Some(r) => Json(r).into_response(),
        None => InvokeFailure(InvokeError::NotFound(format!("invocation {id}"))).into_response(),
    }
}

// ---------------------------------------------------------------------------
// Invoker

pub fn invoker_router(invoker: Arc<Invoker>) -> Router {
    Router::new()
        .route("/invoke/{object}/{binding}", post(invoke))
        .route("/invoke-async/{object}/{binding}", post(invoke_async))
        .route("/results/{id}", get(invoker_result))
        .route("/grid/objects/{id}", get(grid_get))
        .route("/grid/objects/{id}/commit", post(grid_commit))
        .route("/grid/migrate", post(grid_migrate))
        .route("/healthz", get(invoker_health))
        .with_state(invoker)
}

async fn invoke(
    State(inv): State<Arc<Invoker>>,
    Path((object, binding)): Path<(String, String)>,
    Json(req): Json<InvokeRequest>,
) -> Response {
    let target = match object_id(&object) {
        Ok(o) => o,
        Err(r) => return r,
    };
    let env = req.into_envelope(target, binding, Mode::Sync);
    match inv.invoke_sync(env).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => InvokeFailure(e).into_response(),
    }
}

async fn invoke_async(
    State(inv): State<Arc<Invoker>>,
    Path((object, binding)): Path<(String, String)>,
    Json(req): Json<InvokeRequest>,
) -> Response {
    let target = match object_id(&object) {
        Ok(o) => o,
        Err(r) => return r,
    };
    let env = req.into_envelope(target, binding, Mode::Async);
    match inv.invoke_async(env).await {
        Ok(id) => (StatusCode::ACCEPTED, Json(Accepted { invocation_id: id })).into_response(),
        Err(e) => InvokeFailure(e).into_response(),
    }
}

async fn invoker_result(State(inv): State<Arc<Invoker>>, Path(id): Path<String>) -> Response {
    result_of(&inv.deps().results, &id)
}

async fn grid_get(State(inv): State<Arc<Invoker>>, Path(id): Path<String>) -> Response {
    let id = match object_id(&id) {
        Ok(o) => o,
        Err(r) => return r,
    };
    match inv.grid().local_get(&id) {
        Ok(r) => Json(r).into_response(),
        Err(e) => GridFailure(e).into_response(),
    }
}

async fn grid_commit(
    State(inv): State<Arc<Invoker>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(record): Json<ObjectRecord>,
) -> Response {
    let id = match object_id(&id) {
        Ok(o) => o,
        Err(r) => return r,
    };
    let Some(expected) = headers
        .get(EXPECTED_REVISION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok())
    else {
        return GridFailure(GridError::InvalidCommit(format!("missing {EXPECTED_REVISION} header"))).into_response();
    };
    let durable = headers.get(DURABLE).is_some_and(|v| v == "true");
    match inv.grid().commit_with(&id, expected, record, durable).await {
        Ok(c) => Json(c).into_response(),
        Err(e) => GridFailure(e).into_response(),
    }
}

async fn grid_migrate(State(inv): State<Arc<Invoker>>, Json(records): Json<Vec<MigratedRecord>>) -> Response {
    let n = inv.grid().accept_migration(records);
    Json(json!({ "accepted": n })).into_response()
}

async fn invoker_health(State(inv): State<Arc<Invoker>>) -> Response {
    let body = json!({ "component": "invoker", "id": inv.id(), "status": if inv.is_crashed() { "down" } else { "ok" } });
    let status = if inv.is_crashed() { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    (status, Json(body)).into_response()
}

// ---------------------------------------------------------------------------
// Storage gateway

pub fn gateway_router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/storage/allocate", post(allocate))
        .route("/storage/{object}/{key}", get(read_redirect))
        .route("/blob/{*path}", get(blob_get).put(blob_put))
        .route("/healthz", get(|| async { Json(json!({ "component": "gateway", "status": "ok" })) }))
        .layer(DefaultBodyLimit::max(BLOB_LIMIT))
        .with_state(gateway)
}

fn gateway_failure(e: oprc_core::storage::GatewayError) -> Response {
    error_response(gateway_status(&e), "gateway", e.to_string())
}

async fn read_redirect(
    State(gw): State<Arc<Gateway>>,
    Path((object, key)): Path<(String, String)>,
    headers: HeaderMap,
) -> Response {
    let object = match object_id(&object) {
        Ok(o) => o,
        Err(r) => return r,
    };
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .map(|v| v.strip_prefix("Bearer ").unwrap_or(v).to_string());
    let inv = headers
        .get(INVOCATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| InvocationId::new(v).ok());
    let (Some(token), Some(inv)) = (token, inv) else {
        return error_response(
            StatusCode::UNAUTHORIZED,
            "gateway",
            format!("a task token and the {INVOCATION} header are required"),
        );
    };
    match gw.read_redirect(&object, &key, &inv, &token).await {
        Ok(url) => (
            StatusCode::TEMPORARY_REDIRECT,
            [(header::LOCATION, url.absolute(&gw.base_url()))],
        )
            .into_response(),
        Err(e) => gateway_failure(e),
    }
}

#[derive(Deserialize)]
struct SignedQuery {
    expires: Option<u64>,
    sig: Option<String>,
}

fn presigned(method: Method, path: String, q: SignedQuery) -> Result<PresignedUrl, Response> {
    match (q.expires, q.sig) {
        (Some(expires_at), Some(signature)) => Ok(PresignedUrl {
            method,
            path,
            expires_at,
            signature,
        }),
        _ => Err(error_response(StatusCode::FORBIDDEN, "gateway", "missing expires or sig")),
    }
}

async fn blob_get(State(gw): State<Arc<Gateway>>, Path(path): Path<String>, Query(q): Query<SignedQuery>) -> Response {
    let url = match presigned(Method::Get, path, q) {
        Ok(u) => u,
        Err(r) => return r,
    };
    match gw.blob_get(&url) {
        Ok(bytes) => bytes.into_response(),
        Err(e) => gateway_failure(e),
    }
}

async fn blob_put(
    State(gw): State<Arc<Gateway>>,
    Path(path): Path<String>,
    Query(q): Query<SignedQuery>,
    body: Bytes,
) -> Response {
    let url = match presigned(Method::Put, path, q) {
        Ok(u) => u,
        Err(r) => return r,
    };
    match gw.blob_put(&url, &body) {
        Ok(()) => StatusCode::CREATED.into_response(),
        Err(e) => gateway_failure(e),
    }
}

async fn allocate(State(gw): State<Arc<Gateway>>, Json(req): Json<AllocateRequest>) -> Response {
    match gw.allocate_write(&req.object_id, &req.state_key, &req.invocation_id) {
        Ok(a) => Json(a).into_response(),
        Err(e) => gateway_failure(e),
    }
}

// ---------------------------------------------------------------------------
// Control plane

/// Cluster operations the control plane triggers.
pub trait ControlHooks: Send + Sync {
    fn gc(&self) -> Result<usize, String>;
    fn shutdown(&self);
}

#[derive(Clone)]
pub struct ControlState {
    pub registry: Arc<Registry>,
    pub membership: Membership,
    pub peers: Arc<PeerTable>,
    pub hooks: Arc<dyn ControlHooks>,
    pub http: reqwest::Client,
}

pub fn control_router(state: ControlState) -> Router {
    Router::new()
        .route("/api/packages", put(apply_package))
        .route("/api/classes/{name}", get(get_class))
        .route("/api/membership", get(|State(s): State<ControlState>| async move { Json(s.membership) }))
        .route("/api/gc", post(run_gc))
        .route("/api/shutdown", post(shutdown))
        .route("/healthz", get(control_health))
        .with_state(state)
}

async fn apply_package(State(s): State<ControlState>, body: String) -> Response {
    match s.registry.apply_text(&body).await {
        Ok(report) => Json(report).into_response(),
        Err(e) => (registry_status(&e), Json(e)).into_response(),
    }
}

async fn get_class(State(s): State<ControlState>, Path(name): Path<String>) -> Response {
    match s.registry.resolve_class(&name) {
        Ok(c) => Json(c).into_response(),
        Err(e) => (registry_status(&e), Json(e)).into_response(),
    }
}

async fn run_gc(State(s): State<ControlState>) -> Response {
    match s.hooks.gc() {
        Ok(purged) => Json(json!({ "purged": purged })).into_response(),
        Err(e) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "gc", e),
    }
}

async fn shutdown(State(s): State<ControlState>) -> Response {
    s.hooks.shutdown();
    Json(json!({ "status": "stopping" })).into_response()
}

/// Probes every member; any member not answering makes the cluster degraded.
async fn control_health(State(s): State<ControlState>) -> Response {
    let mut members = Vec::new();
    let mut down = 0;
    for (id, url) in s.peers.all() {
        let up = matches!(
            s.http.get(format!("{url}/healthz")).timeout(Duration::from_secs(1)).send().await,
            Ok(r) if r.status().is_success()
        );
        if !up {
            down += 1;
        }
        members.push(json!({ "id": id, "url": url, "up": up }));
    }
    Json(json!({
        "component": "control",
        "status": if down == 0 { "ok" } else { "degraded" },
        "epoch": s.membership.epoch,
        "members": members,
    }))
    .into_response()
}

// ---------------------------------------------------------------------------
// Ingress

pub fn ingress_router(ingress: Arc<Ingress>) -> Router {
    Router::new()
        .route("/invoke/{object}/{binding}", post(ingress_invoke))
        .route("/invoke-async/{object}/{binding}", post(ingress_invoke_async))
        .route("/results/{id}", get(ingress_result))
        .route("/ring", get(ring))
        .route("/healthz", get(|| async { Json(json!({ "component": "ingress", "status": "ok" })) }))
        .with_state(ingress)
}

async fn ingress_invoke(
    State(ing): State<Arc<Ingress>>,
    Path((object, binding)): Path<(String, String)>,
    Json(mut req): Json<InvokeRequest>,
) -> Response {
    let target = match object_id(&object) {
        Ok(o) => o,
        Err(r) => return r,
    };
    req.caller = None;
    match ing.invoke(req.into_envelope(target, binding, Mode::Sync)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => InvokeFailure(e).into_response(),
    }
}

async fn ingress_invoke_async(
    State(ing): State<Arc<Ingress>>,
    Path((object, binding)): Path<(String, String)>,
    Json(mut req): Json<InvokeRequest>,
) -> Response {
    let target = match object_id(&object) {
        Ok(o) => o,
        Err(r) => return r,
    };
    req.caller = None;
    match ing.invoke_async(req.into_envelope(target, binding, Mode::Async)).await {
        Ok(id) => (StatusCode::ACCEPTED, Json(Accepted { invocation_id: id })).into_response(),
        Err(e) => InvokeFailure(e).into_response(),
    }
}

async fn ingress_result(State(ing): State<Arc<Ingress>>, Path(id): Path<String>) -> Response {
    let id = match invocation_id(&id) {
        Ok(i) => i,
        Err(r) => return r,
    };
    match ing.result(&id) {
        Some(r) => Json(r).into_response(),
        None => InvokeFailure(InvokeError::NotFound(format!("invocation {id}"))).into_response(),
    }
}

async fn ring(State(ing): State<Arc<Ingress>>) -> Response {
    let m = ing.membership();
    let ring = ing.ring();
    Json(json!({
        "epoch": m.epoch,
        "members": m.members,
        "vnodesPerMember": m.vnodes_per_member,
        "probes": ring.probes(),
        "points": ring.points().len(),
    }))
    .into_response()
}
