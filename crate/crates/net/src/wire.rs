//! Request bodies and error-to-status mapping shared by servers and clients.

use std::collections::BTreeMap;

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::{Deserialize, Serialize};

use oprc_core::grid::GridError;
use oprc_core::ids::{InvocationId, ObjectId};
use oprc_core::invoker::{InvocationEnvelope, InvokeError, Mode};
use oprc_core::registry::{CallerContext, RegistryError};
use oprc_core::storage::GatewayError;

/// Body of `POST /invoke/{objectId}/{binding}` and `/invoke-async/...`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct InvokeRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub invocation_id: Option<InvocationId>,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub input_refs: Vec<ObjectId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_object_id: Option<ObjectId>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub immutable: bool,
    /// Honoured on the invoker surface only; the ingress treats every client
    /// as external.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caller: Option<CallerContext>,
}

impl InvokeRequest {
    pub fn from_envelope(env: &InvocationEnvelope) -> Self {
        Self {
            invocation_id: Some(env.invocation_id.clone()),
            args: env.args.clone(),
            input_refs: env.input_refs.clone(),
            class_ref: env.class_ref.clone(),
            output_object_id: env.output_object_id.clone(),
            immutable: env.immutable,
            caller: Some(env.caller.clone()),
        }
    }

    pub fn into_envelope(self, target: ObjectId, binding: String, mode: Mode) -> InvocationEnvelope {
        let mut env = InvocationEnvelope::new(target, binding);
        if let Some(id) = self.invocation_id {
            env.invocation_id = id;
        }
        env.args = self.args;
        env.input_refs = self.input_refs;
        env.class_ref = self.class_ref;
        env.output_object_id = self.output_object_id;
        env.immutable = self.immutable;
        env.caller = self.caller.unwrap_or_default();
        env.mode = mode;
        env
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Accepted {
    pub invocation_id: InvocationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AllocateRequest {
    pub object_id: ObjectId,
    pub state_key: String,
    pub invocation_id: InvocationId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

pub const EXPECTED_REVISION: &str = "x-expected-revision";
pub const DURABLE: &str = "x-durable";
pub const INVOCATION: &str = "x-oprc-invocation";

pub fn invoke_status(e: &InvokeError) -> StatusCode {
    match e {
        InvokeError::AccessDenied { .. } => StatusCode::FORBIDDEN,
        InvokeError::NotFound(_) => StatusCode::NOT_FOUND,
        InvokeError::NotOwner { .. } => StatusCode::MISDIRECTED_REQUEST,
        InvokeError::AlreadyExists(_) => StatusCode::CONFLICT,
        InvokeError::Invalid(_) => StatusCode::BAD_REQUEST,
        InvokeError::FunctionFailed(_) | InvokeError::StepFailed { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        InvokeError::EngineFailure(_) | InvokeError::Storage(_) | InvokeError::Unreachable(_) => StatusCode::BAD_GATEWAY,
        InvokeError::Lock(_) | InvokeError::Crashed(_) | InvokeError::Grid(_) | InvokeError::Log(_) => {
            StatusCode::SERVICE_UNAVAILABLE
        }
    }
}

pub fn grid_status(e: &GridError) -> StatusCode {
    match e {
        GridError::NotFound(_) => StatusCode::NOT_FOUND,
        GridError::NotOwner { .. } => StatusCode::MISDIRECTED_REQUEST,
        GridError::RevisionConflict { .. } => StatusCode::CONFLICT,
        GridError::InvalidCommit(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::SERVICE_UNAVAILABLE,
    }
}

pub fn gateway_status(e: &GatewayError) -> StatusCode {
    match e {
        GatewayError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
        GatewayError::Forbidden(_) => StatusCode::FORBIDDEN,
        GatewayError::NotFound => StatusCode::NOT_FOUND,
        GatewayError::TtlTooLarge { .. } | GatewayError::Invalid(_) => StatusCode::BAD_REQUEST,
        GatewayError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        GatewayError::Resolver(_) => StatusCode::BAD_GATEWAY,
    }
}

pub fn registry_status(e: &RegistryError) -> StatusCode {
    match e {
        RegistryError::NotFound(_) => StatusCode::NOT_FOUND,
        RegistryError::EngineDeploy { .. } => StatusCode::BAD_GATEWAY,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

/// Invocation errors travel as their tagged JSON form so a client can
/// rebuild the exact variant.
pub struct InvokeFailure(pub InvokeError);

impl IntoResponse for InvokeFailure {
    fn into_response(self) -> Response {
        (invoke_status(&self.0), Json(self.0)).into_response()
    }
}

pub struct GridFailure(pub GridError);

impl IntoResponse for GridFailure {
    fn into_response(self) -> Response {
        (grid_status(&self.0), Json(self.0)).into_response()
    }
}

pub fn error_response(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: kind.to_string(),
            message: message.into(),
        }),
    )
        .into_response()
}
