//! A task-protocol runtime serving the echo function.

use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{Map, Value};

use oprc_core::protocol::{Task, TaskCompletion};

fn echo(task: Task) -> TaskCompletion {
    let doc: Map<String, Value> = task
        .args
        .iter()
        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
        .collect();
    TaskCompletion::ok(task.invocation_id).with_doc(Value::Object(doc))
}

async fn handle(Json(task): Json<Task>) -> Json<TaskCompletion> {
    Json(echo(task))
}

pub fn router() -> Router {
    Router::new()
        .route("/", post(handle))
        .route("/healthz", get(|| async { "ok" }))
}

pub async fn serve_echo(port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    tracing::info!(port, "echo runtime listening");
    axum::serve(listener, router()).await
}
