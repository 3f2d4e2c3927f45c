//! Storage gateway for unstructured object state.
//!
//! Files are immutable and versioned under
//! `objects/{objectId}/{stateKey}/{versionId}`. Functions never see the
//! gateway secret: they read through [`Gateway::read_redirect`] with a
//! per-task token, which answers with a presigned GET of the version the
//! owning invoker currently has committed, and write to presigned PUT URLs
//! handed out by [`Gateway::allocate_write`]. Versions no committed record
//! references are purged by [`Gateway::gc`] after a grace period.

pub mod blob;
pub mod sign;

use std::collections::HashSet;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::grid::{GridError, GridNode};
use crate::ids::{InvocationId, ObjectId};
use crate::record::ObjectRecord;

pub use blob::{BlobMeta, BlobStore, FsBlobStore};
pub use sign::{Denied, Method, PresignedUrl, Signer};

pub const DEFAULT_MAX_TTL_SECS: u64 = 600;
pub const DEFAULT_GC_GRACE_SECS: u64 = 60;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("ttl {requested}s exceeds maximum {max}s")]
    TtlTooLarge { requested: u64, max: u64 },
    #[error("unauthorized: {0}")]
    Unauthorized(Denied),
    #[error("forbidden: {0}")]
    Forbidden(Denied),
    #[error("not found")]
    NotFound,
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("storage io: {0}")]
    Io(String),
    #[error("version lookup failed: {0}")]
    Resolver(String),
}

impl From<std::io::Error> for GatewayError {
    fn from(e: std::io::Error) -> Self {
        GatewayError::Io(e.to_string())
    }
}

/// Blob path of one file version.
pub fn blob_path(object: &ObjectId, state_key: &str, version_id: &str) -> String {
    format!("objects/{object}/{state_key}/{version_id}")
}

/// Deterministic version id for a write by `invocation`: retries of the same
/// invocation target the same path.
pub fn version_id_for(invocation: &InvocationId, state_key: &str) -> String {
    format!("{invocation}-{state_key}")
}

/// Paths referenced by live (non-tombstoned) records.
pub fn referenced_paths<'a>(records: impl IntoIterator<Item = &'a ObjectRecord>) -> HashSet<String> {
    records
        .into_iter()
        .filter(|r| !r.tombstone)
        .flat_map(|r| {
            r.file_versions
                .iter()
                .map(move |(k, v)| blob_path(&r.id, k, v))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FileVersion {
    pub object_id: ObjectId,
    pub state_key: String,
    pub version_id: String,
    pub length: u64,
    pub created_at: u64,
}

impl FileVersion {
    pub fn path(&self) -> String {
        blob_path(&self.object_id, &self.state_key, &self.version_id)
    }

    fn from_meta(meta: &BlobMeta) -> Option<Self> {
        let mut parts = meta.path.split('/');
        if parts.next()? != "objects" {
            return None;
        }
        let object_id = ObjectId::new(parts.next()?).ok()?;
        let state_key = parts.next()?.to_string();
        let version_id = parts.next()?.to_string();
        if parts.next().is_some() {
            return None;
        }
        Some(Self {
            object_id,
            state_key,
            version_id,
            length: meta.len,
            created_at: meta.created_at,
        })
    }
}

/// A write slot handed to a task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WriteAllocation {
    pub version_id: String,
    pub url: String,
}

/// Looks up the committed version of a state key. The grid implements this
/// by asking the owning invoker.
#[async_trait]
pub trait VersionResolver: Send + Sync {
    async fn current_version(&self, object: &ObjectId, state_key: &str) -> Result<Option<String>, GatewayError>;
}

#[async_trait]
impl VersionResolver for GridNode {
    async fn current_version(&self, object: &ObjectId, state_key: &str) -> Result<Option<String>, GatewayError> {
        match self.get(object).await {
            Ok(r) if r.tombstone => Ok(None),
            Ok(r) => Ok(r.file_versions.get(state_key).cloned()),
            Err(GridError::NotFound(_)) => Ok(None),
            Err(e) => Err(GatewayError::Resolver(e.to_string())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub base_url: String,
    pub max_ttl_secs: u64,
    pub gc_grace_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            base_url: "http://gateway.local".into(),
            max_ttl_secs: DEFAULT_MAX_TTL_SECS,
            gc_grace_secs: DEFAULT_GC_GRACE_SECS,
        }
    }
}

pub struct Gateway {
    signer: Signer,
    blobs: Arc<dyn BlobStore>,
    clock: Arc<dyn Clock>,
    resolver: RwLock<Option<Arc<dyn VersionResolver>>>,
    config: RwLock<GatewayConfig>,
}

impl Gateway {
    pub fn new(
        secret: impl Into<Vec<u8>>,
        blobs: Arc<dyn BlobStore>,
        clock: Arc<dyn Clock>,
        config: GatewayConfig,
    ) -> Self {
        Self {
            signer: Signer::new(secret),
            blobs,
            clock,
            resolver: RwLock::new(None),
            config: RwLock::new(config),
        }
    }

    pub fn set_resolver(&self, resolver: Arc<dyn VersionResolver>) {
        *self.resolver.write() = Some(resolver);
    }

    pub fn set_base_url(&self, base_url: impl Into<String>) {
        self.config.write().base_url = base_url.into();
    }

    pub fn base_url(&self) -> String {
        self.config.read().base_url.clone()
    }

    pub fn max_ttl(&self) -> u64 {
        self.config.read().max_ttl_secs
    }

    pub fn now(&self) -> u64 {
        self.clock.now_secs()
    }

    pub fn blobs(&self) -> &Arc<dyn BlobStore> {
        &self.blobs
    }

    pub fn presign(
        &self,
        method: Method,
        object: &ObjectId,
        state_key: &str,
        version_id: &str,
        ttl_secs: u64,
    ) -> Result<PresignedUrl, GatewayError> {
        let max = self.max_ttl();
        if ttl_secs > max {
            return Err(GatewayError::TtlTooLarge {
                requested: ttl_secs,
                max,
            });
        }
        check_segment(state_key)?;
        check_segment(version_id)?;
        Ok(self.signer.presign(
            method,
            &blob_path(object, state_key, version_id),
            self.now() + ttl_secs,
        ))
    }

    pub fn verify(&self, url: &PresignedUrl, method: Method, path: &str) -> Result<(), Denied> {
        self.signer.verify(url, method, path, self.now())
    }

    /// Per-task secret authorizing reads of `object` by `invocation`.
    pub fn mint_task_token(&self, invocation: &InvocationId, object: &ObjectId, ttl_secs: u64) -> String {
        self.signer
            .task_token(invocation.as_str(), object.as_str(), self.now() + ttl_secs)
    }

    /// Resolves the committed version of `object/state_key` and returns a
    /// presigned GET for it.
    pub async fn read_redirect(
        &self,
        object: &ObjectId,
        state_key: &str,
        invocation: &InvocationId,
        task_token: &str,
    ) -> Result<PresignedUrl, GatewayError> {
        self.signer
            .verify_task_token(task_token, invocation.as_str(), object.as_str(), self.now())
            .map_err(GatewayError::Unauthorized)?;
        let resolver = self
            .resolver
            .read()
            .clone()
            .ok_or_else(|| GatewayError::Resolver("no version resolver configured".into()))?;
        let version = resolver
            .current_version(object, state_key)
            .await?
            .ok_or(GatewayError::NotFound)?;
        let ttl = self.max_ttl();
        self.presign(Method::Get, object, state_key, &version, ttl)
    }

    /// Allocates the version a task writes `state_key` to. The version id is
    /// deterministic in the invocation id.
    pub fn allocate_write(
        &self,
        object: &ObjectId,
        state_key: &str,
        invocation: &InvocationId,
    ) -> Result<WriteAllocation, GatewayError> {
        let version_id = version_id_for(invocation, state_key);
        let ttl = self.max_ttl();
        let url = self.presign(Method::Put, object, state_key, &version_id, ttl)?;
        Ok(WriteAllocation {
            version_id,
            url: url.absolute(&self.base_url()),
        })
    }

    pub fn blob_get(&self, url: &PresignedUrl) -> Result<Vec<u8>, GatewayError> {
        self.signer
            .verify(url, Method::Get, &url.path, self.now())
            .map_err(GatewayError::Forbidden)?;
        self.blobs.get(&url.path)?.ok_or(GatewayError::NotFound)
    }

    pub fn blob_put(&self, url: &PresignedUrl, bytes: &[u8]) -> Result<(), GatewayError> {
        self.signer
            .verify(url, Method::Put, &url.path, self.now())
            .map_err(GatewayError::Forbidden)?;
        self.blobs.put(&url.path, bytes)?;
        Ok(())
    }

    pub fn list_versions(&self) -> Result<Vec<FileVersion>, GatewayError> {
        Ok(self
            .blobs
            .list()?
            .iter()
            .filter_map(FileVersion::from_meta)
            .collect())
    }

    /// Deletes versions that no committed record references and that are
    /// older than the grace period. Never touches a referenced path.
    pub fn gc(&self, referenced: &HashSet<String>) -> usize {
        let grace = self.config.read().gc_grace_secs;
        let now = self.now();
        let listing = match self.blobs.list() {
            Ok(l) => l,
            Err(e) => {
                tracing::warn!(error = %e, "gc listing failed");
                return 0;
            }
        };
        let mut purged = 0;
        for meta in listing {
            if referenced.contains(&meta.path) || now.saturating_sub(meta.created_at) < grace {
                continue;
            }
            match self.blobs.delete(&meta.path) {
                Ok(true) => purged += 1,
                Ok(false) => {}
                Err(e) => tracing::warn!(path = %meta.path, error = %e, "gc delete failed"),
            }
        }
        purged
    }
}

fn check_segment(s: &str) -> Result<(), GatewayError> {
    if crate::ids::is_valid_identifier(s) {
        Ok(())
    } else {
        Err(GatewayError::Invalid(format!("bad path segment {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use std::collections::HashMap;

    struct FixedVersions(RwLock<HashMap<(String, String), String>>);

    #[async_trait]
    impl VersionResolver for FixedVersions {
        async fn current_version(&self, o: &ObjectId, k: &str) -> Result<Option<String>, GatewayError> {
            Ok(self.0.read().get(&(o.to_string(), k.to_string())).cloned())
        }
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        clock: Arc<ManualClock>,
        versions: Arc<FixedVersions>,
        gw: Gateway,
    }

    fn fixture() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000_000));
        let blobs = Arc::new(FsBlobStore::open(dir.path(), clock.clone()).unwrap());
        let gw = Gateway::new(b"secret".to_vec(), blobs, clock.clone(), GatewayConfig::default());
        let versions = Arc::new(FixedVersions(RwLock::new(HashMap::new())));
        gw.set_resolver(versions.clone());
        Fixture {
            _dir: dir,
            clock,
            versions,
            gw,
        }
    }

    fn oid(s: &str) -> ObjectId {
        ObjectId::new(s).unwrap()
    }

    fn iid(s: &str) -> InvocationId {
        InvocationId::new(s).unwrap()
    }

    #[test]
    fn presign_then_verify_until_expiry() {
        let f = fixture();
        let url = f.gw.presign(Method::Get, &oid("o1"), "mp4", "v1", 600).unwrap();
        assert_eq!(f.gw.verify(&url, Method::Get, "objects/o1/mp4/v1"), Ok(()));
        f.clock.advance(601);
        assert_eq!(f.gw.verify(&url, Method::Get, "objects/o1/mp4/v1"), Err(Denied::Expired));
        assert_eq!(
            f.gw.presign(Method::Get, &oid("o1"), "mp4", "v1", 601),
            Err(GatewayError::TtlTooLarge { requested: 601, max: 600 })
        );
    }

    #[tokio::test]
    async fn redirect_points_at_committed_version() {
        let f = fixture();
        f.versions
            .0
            .write()
            .insert(("o1".into(), "f1".into()), "v1".into());
        let tok = f.gw.mint_task_token(&iid("t1"), &oid("o1"), 60);
        let url = f.gw.read_redirect(&oid("o1"), "f1", &iid("t1"), &tok).await.unwrap();
        assert_eq!(url.path, "objects/o1/f1/v1");
        assert_eq!(
            f.gw.read_redirect(&oid("o1"), "nokey", &iid("t1"), &tok).await,
            Err(GatewayError::NotFound)
        );
    }

    #[tokio::test]
    async fn token_from_other_task_is_unauthorized() {
        let f = fixture();
        f.versions
            .0
            .write()
            .insert(("o1".into(), "f1".into()), "v1".into());
        let t1 = f.gw.mint_task_token(&iid("t1"), &oid("o1"), 60);
        assert!(matches!(
            f.gw.read_redirect(&oid("o1"), "f1", &iid("t2"), &t1).await,
            Err(GatewayError::Unauthorized(_))
        ));
        f.clock.advance(61);
        assert_eq!(
            f.gw.read_redirect(&oid("o1"), "f1", &iid("t1"), &t1).await,
            Err(GatewayError::Unauthorized(Denied::Expired))
        );
    }

    #[test]
    fn allocation_is_deterministic_per_invocation() {
        let f = fixture();
        let a = f.gw.allocate_write(&oid("o1"), "mp4", &iid("inv-1")).unwrap();
        let b = f.gw.allocate_write(&oid("o1"), "mp4", &iid("inv-1")).unwrap();
        let c = f.gw.allocate_write(&oid("o1"), "mp4", &iid("inv-2")).unwrap();
        assert_eq!(a.version_id, "inv-1-mp4");
        assert_eq!(a.version_id, b.version_id);
        assert_ne!(a.version_id, c.version_id);
    }

    #[test]
    fn upload_then_download_roundtrip() {
        let f = fixture();
        let alloc = f.gw.allocate_write(&oid("o1"), "mp4", &iid("inv-1")).unwrap();
        let put = PresignedUrl::parse(Method::Put, &alloc.url).unwrap();
        f.gw.blob_put(&put, b"payload").unwrap();
        let get = f.gw.presign(Method::Get, &oid("o1"), "mp4", &alloc.version_id, 60).unwrap();
        assert_eq!(f.gw.blob_get(&get).unwrap(), b"payload");
        // a PUT url cannot be used to read, nor a GET url to write
        let as_get = PresignedUrl { method: Method::Get, ..put.clone() };
        assert!(matches!(f.gw.blob_get(&as_get), Err(GatewayError::Forbidden(_))));
        let as_put = PresignedUrl { method: Method::Put, ..get };
        assert!(matches!(f.gw.blob_put(&as_put, b"x"), Err(GatewayError::Forbidden(_))));
    }

    #[test]
    fn gc_respects_references_and_grace() {
        let f = fixture();
        let o1 = oid("o1");
        let put = |v: &str, b: &[u8]| {
            let url = f.gw.presign(Method::Put, &o1, "f1", v, 60).unwrap();
            f.gw.blob_put(&url, b).unwrap();
        };
        put("v1", b"one");
        put("v2", b"two");
        put("orphan", b"crashed upload");
        let mut referenced = HashSet::new();
        referenced.insert(blob_path(&o1, "f1", "v2"));
        // within grace nothing goes
        assert_eq!(f.gw.gc(&referenced), 0);
        f.clock.advance(DEFAULT_GC_GRACE_SECS);
        assert_eq!(f.gw.gc(&referenced), 2);
        let left: Vec<_> = f.gw.list_versions().unwrap().into_iter().map(|v| v.version_id).collect();
        assert_eq!(left, vec!["v2"]);
        for _ in 0..1000 {
            f.clock.advance(1000);
            assert_eq!(f.gw.gc(&referenced), 0);
        }
        assert_eq!(f.gw.list_versions().unwrap().len(), 1);
    }

    #[test]
    fn referenced_paths_skip_tombstones() {
        let mut a = ObjectRecord::fresh(oid("a"), "p.c");
        a.file_versions.insert("f".into(), "v1".into());
        let mut b = ObjectRecord::fresh(oid("b"), "p.c");
        b.file_versions.insert("f".into(), "v9".into());
        b.tombstone = true;
        let r = referenced_paths([&a, &b]);
        assert_eq!(r, HashSet::from(["objects/a/f/v1".to_string()]));
    }
}
