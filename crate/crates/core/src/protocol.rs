//! Task protocol v1 between invokers and function runtimes.
//!
//! An invoker POSTs a JSON [`Task`] to the function endpoint and receives a
//! JSON [`TaskCompletion`]. Field names are frozen; every body carries
//! `taskProtocol: 1`. Optional fields are omitted when absent and unknown
//! fields are ignored on read. Golden request/response pairs live in
//! `fixtures/task-protocol/`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ids::{InvocationId, ObjectId};
use crate::record::ObjectRecord;
use crate::storage::{Gateway, GatewayError, WriteAllocation};

pub const TASK_PROTOCOL_VERSION: u32 = 1;

/// The part of an object record a function gets to see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectSnapshot {
    pub id: ObjectId,
    pub class_ref: String,
    pub doc: Value,
    #[serde(default)]
    pub file_versions: BTreeMap<String, String>,
    pub revision: u64,
}

impl From<&ObjectRecord> for ObjectSnapshot {
    fn from(r: &ObjectRecord) -> Self {
        Self {
            id: r.id.clone(),
            class_ref: r.class_ref.clone(),
            doc: r.doc.clone(),
            file_versions: r.file_versions.clone(),
            revision: r.revision,
        }
    }
}

/// A pre-created output object the function may fill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutputTemplate {
    pub object_id: ObjectId,
    pub class_ref: String,
    #[serde(default)]
    pub write_allocations: BTreeMap<String, WriteAllocation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Task {
    pub task_protocol: u32,
    pub invocation_id: InvocationId,
    /// Qualified function name.
    pub function: String,
    /// Binding name the caller used.
    pub binding: String,
    pub function_endpoint: String,
    pub main_object: ObjectSnapshot,
    #[serde(default)]
    pub input_objects: Vec<ObjectSnapshot>,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
    #[serde(default)]
    pub write_allocations: BTreeMap<String, WriteAllocation>,
    /// Object id to task token for reads through the storage gateway.
    #[serde(default)]
    pub read_grants: BTreeMap<String, String>,
    pub storage_url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_template: Option<OutputTemplate>,
    /// Unix seconds after which the invoker gives up on the task.
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct OutputObject {
    pub doc: Value,
    #[serde(default)]
    pub committed_keys: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskCompletion {
    pub task_protocol: u32,
    pub invocation_id: InvocationId,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_doc: Option<Value>,
    #[serde(default)]
    pub committed_keys: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_object: Option<OutputObject>,
    /// Value handed back to the caller without touching state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_doc: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskCompletion {
    pub fn ok(invocation_id: InvocationId) -> Self {
        Self {
            task_protocol: TASK_PROTOCOL_VERSION,
            invocation_id,
            success: true,
            new_doc: None,
            committed_keys: BTreeMap::new(),
            output_object: None,
            return_doc: None,
            error: None,
        }
    }

    pub fn failed(invocation_id: InvocationId, error: impl Into<String>) -> Self {
        Self {
            success: false,
            error: Some(error.into()),
            ..Self::ok(invocation_id)
        }
    }

    pub fn with_doc(mut self, doc: Value) -> Self {
        self.new_doc = Some(doc);
        self
    }

    /// Parses a runtime response body.
    pub fn from_json(body: &[u8]) -> Result<Self, ProtocolViolation> {
        serde_json::from_slice(body).map_err(|e| ProtocolViolation(format!("malformed completion: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol violation: {0}")]
pub struct ProtocolViolation(pub String);

/// Checks a completion against the task it answers. Failed completions are
/// only checked for identity; their payload is ignored.
pub fn validate_completion(task: &Task, c: &TaskCompletion) -> Result<(), ProtocolViolation> {
    let v = |m: String| Err(ProtocolViolation(m));
    if c.task_protocol != TASK_PROTOCOL_VERSION {
        return v(format!("taskProtocol {} is not {TASK_PROTOCOL_VERSION}", c.task_protocol));
    }
    if c.invocation_id != task.invocation_id {
        return v(format!(
            "completion for {} answers task {}",
            c.invocation_id, task.invocation_id
        ));
    }
    if !c.success {
        return Ok(());
    }
    if let Some(doc) = &c.new_doc {
        if !doc.is_object() {
            return v("newDoc is not a JSON object".into());
        }
    }
    check_keys(&c.committed_keys, &task.write_allocations, "committedKeys")?;
    if let Some(out) = &c.output_object {
        let Some(tpl) = &task.output_template else {
            return v("outputObject without an output template".into());
        };
        if !out.doc.is_object() {
            return v("outputObject.doc is not a JSON object".into());
        }
        check_keys(&out.committed_keys, &tpl.write_allocations, "outputObject.committedKeys")?;
    }
    Ok(())
}

fn check_keys(
    committed: &BTreeMap<String, String>,
    allocated: &BTreeMap<String, WriteAllocation>,
    what: &str,
) -> Result<(), ProtocolViolation> {
    for (k, version) in committed {
        match allocated.get(k) {
            None => return Err(ProtocolViolation(format!("{what} contains unallocated key {k}"))),
            Some(a) if a.version_id != *version => {
                return Err(ProtocolViolation(format!(
                    "{what}[{k}] = {version} but {} was allocated",
                    a.version_id
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Everything needed to build one task.
#[derive(Debug, Clone)]
pub struct TaskSpec<'a> {
    pub invocation_id: &'a InvocationId,
    pub function: &'a str,
    pub binding: &'a str,
    pub endpoint: &'a str,
    pub main: &'a ObjectRecord,
    pub inputs: &'a [ObjectRecord],
    pub args: &'a BTreeMap<String, String>,
    /// State keys of the main object the task may write.
    pub write_keys: &'a [String],
    /// Output object id, class and its writable state keys.
    pub output: Option<(&'a ObjectId, &'a str, &'a [String])>,
    pub timeout_secs: u64,
}

/// Builds a self-contained task: structured state is bundled in, file
/// access goes through presigned URLs and per-task read tokens.
pub fn build_task(gateway: &Gateway, spec: TaskSpec<'_>) -> Result<Task, GatewayError> {
    let mut write_allocations = BTreeMap::new();
    for k in spec.write_keys {
        write_allocations.insert(k.clone(), gateway.allocate_write(&spec.main.id, k, spec.invocation_id)?);
    }
    let mut read_grants = BTreeMap::new();
    for obj in std::iter::once(spec.main).chain(spec.inputs) {
        read_grants.insert(
            obj.id.to_string(),
            gateway.mint_task_token(spec.invocation_id, &obj.id, spec.timeout_secs),
        );
    }
    let output_template = match spec.output {
        None => None,
        Some((id, class, keys)) => {
            let mut allocs = BTreeMap::new();
            for k in keys {
                allocs.insert(k.clone(), gateway.allocate_write(id, k, spec.invocation_id)?);
            }
            Some(OutputTemplate {
                object_id: id.clone(),
                class_ref: class.to_string(),
                write_allocations: allocs,
            })
        }
    };
    Ok(Task {
        task_protocol: TASK_PROTOCOL_VERSION,
        invocation_id: spec.invocation_id.clone(),
        function: spec.function.to_string(),
        binding: spec.binding.to_string(),
        function_endpoint: spec.endpoint.to_string(),
        main_object: spec.main.into(),
        input_objects: spec.inputs.iter().map(ObjectSnapshot::from).collect(),
        args: spec.args.clone(),
        write_allocations,
        read_grants,
        storage_url: gateway.base_url(),
        output_template,
        deadline: gateway.now() + spec.timeout_secs,
    })
}
