//! HTTP clients: invoker-to-invoker routing, the grid transport, file access
//! for inline functions, and the client the CLI uses.

use std::collections::HashMap;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::RwLock;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde_json::Value;

use oprc_core::engine::FileAccess;
use oprc_core::grid::{CommitResult, GridError, GridTransport, MigratedRecord};
use oprc_core::ids::{InvocationId, InvokerId, ObjectId};
use oprc_core::invoker::{InvocationEnvelope, InvocationResult, InvokeError, InvokerRouter};
use oprc_core::record::ObjectRecord;
use oprc_core::registry::{RegistrationReport, RegistryError, ResolvedClass};
use oprc_core::storage::WriteAllocation;

use crate::wire::{Accepted, AllocateRequest, InvokeRequest, DURABLE, EXPECTED_REVISION, INVOCATION};

/// Long enough for the slowest task plus queueing on the object lock.
const CALL_TIMEOUT: Duration = Duration::from_secs(180);

pub fn http_client() -> reqwest::Client {
    reqwest::Client::builder()
        .timeout(CALL_TIMEOUT)
        .build()
        .expect("http client builds")
}

/// Base URL of every invoker by id.
#[derive(Default)]
pub struct PeerTable {
    urls: RwLock<HashMap<InvokerId, String>>,
}

impl PeerTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self, id: InvokerId, url: impl Into<String>) {
        self.urls.write().insert(id, url.into());
    }

    pub fn url(&self, id: &InvokerId) -> Option<String> {
        self.urls.read().get(id).cloned()
    }

    pub fn all(&self) -> Vec<(InvokerId, String)> {
        let mut v: Vec<_> = self.urls.read().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort();
        v
    }
}

async fn decode_invoke<T: DeserializeOwned>(resp: reqwest::Response) -> Result<T, InvokeError> {
    let status = resp.status();
    let bytes = resp
        .bytes()
        .await
        .map_err(|e| InvokeError::Unreachable(e.to_string()))?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| InvokeError::Unreachable(format!("bad response: {e}")));
    }
    Err(serde_json::from_slice::<InvokeError>(&bytes).unwrap_or_else(|_| {
        InvokeError::Unreachable(format!("{status}: {}", String::from_utf8_lossy(&bytes)))
    }))
}

/// Routes invocations to invokers over their HTTP surface.
pub struct HttpRouter {
    http: reqwest::Client,
    peers: std::sync::Arc<PeerTable>,
}

impl HttpRouter {
    pub fn new(peers: std::sync::Arc<PeerTable>) -> Self {
        Self {
            http: http_client(),
            peers,
        }
    }

    fn url(&self, to: &InvokerId, path: &str) -> Result<String, InvokeError> {
        let base = self
            .peers
            .url(to)
            .ok_or_else(|| InvokeError::Unreachable(format!("no address for {to}")))?;
        Ok(format!("{base}{path}"))
    }
}

#[async_trait]
impl InvokerRouter for HttpRouter {
    async fn route(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationResult, InvokeError> {
        let url = self.url(to, &format!("/invoke/{}/{}", env.target_object_id, env.binding_name))?;
        let resp = self
            .http
            .post(url)
            .json(&InvokeRequest::from_envelope(&env))
            .send()
            .await
            .map_err(|e| InvokeError::Unreachable(format!("{to}: {e}")))?;
        decode_invoke(resp).await
    }

    async fn submit(&self, to: &InvokerId, env: InvocationEnvelope) -> Result<InvocationId, InvokeError> {
        let url = self.url(to, &format!("/invoke-async/{}/{}", env.target_object_id, env.binding_name))?;
        let resp = self
            .http
            .post(url)
            .json(&InvokeRequest::from_envelope(&env))
            .send()
            .await
            .map_err(|e| InvokeError::Unreachable(format!("{to}: {e}")))?;
        decode_invoke::<Accepted>(resp).await.map(|a| a.invocation_id)
    }
}

/// Grid protocol over HTTP.
pub struct HttpGridTransport {
    http: reqwest::Client,
    peers: std::sync::Arc<PeerTable>,
}

impl HttpGridTransport {
    pub fn new(peers: std::sync::Arc<PeerTable>) -> Self {
        Self {
            http: http_client(),
            peers,
        }
    }

    fn base(&self, owner: &InvokerId) -> Result<String, GridError> {
        self.peers.url(owner).ok_or_else(|| GridError::OwnerUnreachable(owner.clone()))
    }
}

async fn decode_grid<T: DeserializeOwned>(owner: &InvokerId, resp: Result<reqwest::Response, reqwest::Error>) -> Result<T, GridError> {
    let resp = resp.map_err(|_| GridError::OwnerUnreachable(owner.clone()))?;
    let status = resp.status();
    let bytes = resp.bytes().await.map_err(|_| GridError::OwnerUnreachable(owner.clone()))?;
    if status.is_success() {
        return serde_json::from_slice(&bytes).map_err(|e| GridError::Migration(format!("bad response: {e}")));
    }
    Err(serde_json::from_slice::<GridError>(&bytes).unwrap_or(GridError::OwnerUnreachable(owner.clone())))
}

#[async_trait]
impl GridTransport for HttpGridTransport {
    async fn fetch(&self, owner: &InvokerId, id: &ObjectId) -> Result<ObjectRecord, GridError> {
        let url = format!("{}/grid/objects/{id}", self.base(owner)?);
        decode_grid(owner, self.http.get(url).send().await).await
    }

    async fn commit(
        &self,
        owner: &InvokerId,
        id: &ObjectId,
        expected_revision: u64,
        record: ObjectRecord,
        durable: bool,
    ) -> Result<CommitResult, GridError> {
        let url = format!("{}/grid/objects/{id}/commit", self.base(owner)?);
        let resp = self
            .http
            .post(url)
            .header(EXPECTED_REVISION, expected_revision)
            .header(DURABLE, durable.to_string())
            .json(&record)
            .send()
            .await;
        decode_grid(owner, resp).await
    }

    async fn migrate(&self, to: &InvokerId, records: Vec<MigratedRecord>) -> Result<usize, GridError> {
        let url = format!("{}/grid/migrate", self.base(to)?);
        let v: Value = decode_grid(to, self.http.post(url).json(&records).send().await).await?;
        Ok(v["accepted"].as_u64().unwrap_or(0) as usize)
    }
}

/// File access for inline functions through the gateway's HTTP surface,
/// the same path an out-of-process runtime takes.
pub struct HttpFileAccess {
    http: reqwest::Client,
    gateway_url: String,
}

impl HttpFileAccess {
    pub fn new(gateway_url: impl Into<String>) -> Self {
        Self {
            http: http_client(),
            gateway_url: gateway_url.into(),
        }
    }
}

#[async_trait]
impl FileAccess for HttpFileAccess {
    async fn read(&self, invocation: &InvocationId, token: &str, object: &ObjectId, key: &str) -> Result<Option<Vec<u8>>, String> {
        // the redirect is followed to the presigned blob URL
        let resp = self
            .http
            .get(format!("{}/storage/{object}/{key}", self.gateway_url.trim_end_matches('/')))
            .header(reqwest::header::AUTHORIZATION, format!("Bearer {token}"))
            .header(INVOCATION, invocation.as_str())
            .send()
            .await
            .map_err(|e| e.to_string())?;
        match resp.status() {
            StatusCode::NOT_FOUND => Ok(None),
            s if s.is_success() => Ok(Some(resp.bytes().await.map_err(|e| e.to_string())?.to_vec())),
            s => Err(format!("read {object}/{key}: {s}: {}", resp.text().await.unwrap_or_default())),
        }
    }

    async fn write(&self, put_url: &str, bytes: Vec<u8>) -> Result<(), String> {
        let resp = self.http.put(put_url).body(bytes).send().await.map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("upload: {}: {}", resp.status(), resp.text().await.unwrap_or_default()))
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("{0}")]
    Invoke(InvokeError),
    #[error("{0}")]
    Registry(RegistryError),
    #[error("{status}: {body}")]
    Status { status: u16, body: String },
}

impl ClientError {
    /// Infrastructure trouble as opposed to a rejected request.
    pub fn is_infra(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Invoke(e) => e.is_infra(),
            ClientError::Registry(_) => false,
            ClientError::Status { status, .. } => *status >= 500,
        }
    }
}

/// Client of the control plane and ingress.
#[derive(Clone)]
pub struct OprcClient {
    http: reqwest::Client,
    pub control_url: String,
    pub ingress_url: String,
}

impl OprcClient {
    pub fn new(control_url: impl Into<String>, ingress_url: impl Into<String>) -> Self {
        Self {
            http: http_client(),
            control_url: control_url.into(),
            ingress_url: ingress_url.into(),
        }
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<(StatusCode, bytes_body::Body), ClientError> {
        let resp = req.send().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.bytes().await.map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok((status, bytes_body::Body(body.to_vec())))
    }

    pub async fn apply_package(&self, text: &str) -> Result<RegistrationReport, ClientError> {
        let (status, body) = self
            .send(self.http.put(format!("{}/api/packages", self.control_url)).body(text.to_string()))
            .await?;
        if status.is_success() {
            return body.json();
        }
        Err(serde_json::from_slice::<RegistryError>(&body.0)
            .map(ClientError::Registry)
            .unwrap_or_else(|_| body.status_error(status)))
    }

    pub async fn class(&self, qualified: &str) -> Result<ResolvedClass, ClientError> {
        let (status, body) = self.send(self.http.get(format!("{}/api/classes/{qualified}", self.control_url))).await?;
        if status.is_success() {
            return body.json();
        }
        Err(serde_json::from_slice::<RegistryError>(&body.0)
            .map(ClientError::Registry)
            .unwrap_or_else(|_| body.status_error(status)))
    }

    pub async fn invoke(&self, object: &str, binding: &str, req: &InvokeRequest) -> Result<InvocationResult, ClientError> {
        let url = format!("{}/invoke/{object}/{binding}", self.ingress_url);
        let (status, body) = self.send(self.http.post(url).json(req)).await?;
        body.invoke_result(status)
    }

    pub async fn invoke_async(&self, object: &str, binding: &str, req: &InvokeRequest) -> Result<InvocationId, ClientError> {
        let url = format!("{}/invoke-async/{object}/{binding}", self.ingress_url);
        let (status, body) = self.send(self.http.post(url).json(req)).await?;
        body.invoke_result::<Accepted>(status).map(|a| a.invocation_id)
    }

    pub async fn result(&self, id: &str) -> Result<InvocationResult, ClientError> {
        let (status, body) = self.send(self.http.get(format!("{}/results/{id}", self.ingress_url))).await?;
        body.invoke_result(status)
    }

    pub async fn ring(&self) -> Result<Value, ClientError> {
        self.get_json(&format!("{}/ring", self.ingress_url)).await
    }

    pub async fn health(&self) -> Result<Value, ClientError> {
        self.get_json(&format!("{}/healthz", self.control_url)).await
    }

    pub async fn gc(&self) -> Result<Value, ClientError> {
        let (status, body) = self.send(self.http.post(format!("{}/api/gc", self.control_url))).await?;
        if status.is_success() {
            body.json()
        } else {
            Err(body.status_error(status))
        }
    }

    pub async fn shutdown(&self) -> Result<(), ClientError> {
        let (status, body) = self.send(self.http.post(format!("{}/api/shutdown", self.control_url))).await?;
        if status.is_success() {
            Ok(())
        } else {
            Err(body.status_error(status))
        }
    }

    pub async fn allocate(&self, gateway_url: &str, req: &AllocateRequest) -> Result<WriteAllocation, ClientError> {
        let (status, body) = self
            .send(self.http.post(format!("{gateway_url}/storage/allocate")).json(req))
            .await?;
        if status.is_success() {
            body.json()
        } else {
            Err(body.status_error(status))
        }
    }

    async fn get_json(&self, url: &str) -> Result<Value, ClientError> {
        let (status, body) = self.send(self.http.get(url)).await?;
        if status.is_success() {
            body.json()
        } else {
            Err(body.status_error(status))
        }
    }
}

mod bytes_body {
    use super::*;

    pub struct Body(pub Vec<u8>);

    impl Body {
        pub fn json<T: DeserializeOwned>(&self) -> Result<T, ClientError> {
            serde_json::from_slice(&self.0).map_err(|e| ClientError::Transport(format!("bad response: {e}")))
        }

        pub fn status_error(&self, status: StatusCode) -> ClientError {
            ClientError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&self.0).into_owned(),
            }
        }

        pub fn invoke_result<T: DeserializeOwned>(&self, status: StatusCode) -> Result<T, ClientError> {
            if status.is_success() {
                return self.json();
            }
            Err(serde_json::from_slice::<InvokeError>(&self.0)
                .map(ClientError::Invoke)
                .unwrap_or_else(|_| self.status_error(status)))
        }
    }
}
