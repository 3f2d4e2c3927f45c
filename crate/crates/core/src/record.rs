use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ids::ObjectId;

pub type PartitionId = u32;

/// One cloud object: structured document, the version map of its
/// unstructured files, a revision counter and the last processed log offset
/// per partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectRecord {
    pub id: ObjectId,
    pub class_ref: String,
    #[serde(default = "empty_doc")]
    pub doc: Value,
    #[serde(default)]
    pub file_versions: BTreeMap<String, String>,
    pub revision: u64,
    #[serde(default)]
    pub last_offset: BTreeMap<PartitionId, u64>,
    #[serde(default)]
    pub tombstone: bool,
}

fn empty_doc() -> Value {
    Value::Object(Default::default())
}

impl ObjectRecord {
    /// A not-yet-committed record at revision 0.
    pub fn fresh(id: ObjectId, class_ref: impl Into<String>) -> Self {
        Self {
            id,
            class_ref: class_ref.into(),
            doc: empty_doc(),
            file_versions: BTreeMap::new(),
            revision: 0,
            last_offset: BTreeMap::new(),
            tombstone: false,
        }
    }

    /// Copy with `revision + 1`, ready to be committed against `self.revision`.
    pub fn next_revision(&self) -> Self {
        let mut next = self.clone();
        next.revision += 1;
        next
    }

    /// Whether `offset` on `partition` was already applied to this record.
    pub fn has_processed(&self, partition: PartitionId, offset: u64) -> bool {
        self.last_offset
            .get(&partition)
            .is_some_and(|last| offset <= *last)
    }

    /// Equality ignoring offset bookkeeping.
    pub fn same_state(&self, other: &Self) -> bool {
        self.id == other.id
            && self.class_ref == other.class_ref
            && self.doc == other.doc
            && self.file_versions == other.file_versions
            && self.revision == other.revision
            && self.tombstone == other.tombstone
    }
}
