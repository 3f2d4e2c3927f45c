//! Immutable-file blob storage behind the gateway.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, UNIX_EPOCH};

use crate::clock::Clock;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlobMeta {
    pub path: String,
    pub len: u64,
    pub created_at: u64,
}

pub trait BlobStore: Send + Sync {
    /// Stores `bytes` at `path`, atomically replacing any previous content.
    fn put(&self, path: &str, bytes: &[u8]) -> io::Result<()>;
    fn get(&self, path: &str) -> io::Result<Option<Vec<u8>>>;
    fn delete(&self, path: &str) -> io::Result<bool>;
    fn list(&self) -> io::Result<Vec<BlobMeta>>;
}

/// Filesystem tree rooted at a directory. Writes go to a temp file that is
/// fsynced and renamed into place, so readers see either the whole old file
/// or the whole new one. The file's mtime is set from the injected clock and
/// serves as its creation time.
pub struct FsBlobStore {
    root: PathBuf,
    clock: Arc<dyn Clock>,
}

impl FsBlobStore {
    pub fn open(root: impl AsRef<Path>, clock: Arc<dyn Clock>) -> io::Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        Ok(Self { root, clock })
    }

    fn resolve(&self, path: &str) -> io::Result<PathBuf> {
        let ok = !path.is_empty()
            && path
                .split('/')
                .all(|seg| crate::ids::is_valid_identifier(seg));
        if !ok {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad blob path {path:?}")));
        }
        Ok(self.root.join(path))
    }
}

impl BlobStore for FsBlobStore {
    fn put(&self, path: &str, bytes: &[u8]) -> io::Result<()> {
        let dest = self.resolve(path)?;
        let dir = dest.parent().expect("resolved paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(bytes)?;
            f.set_modified(UNIX_EPOCH + Duration::from_secs(self.clock.now_secs()))?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &dest)?;
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
        Ok(())
    }

    fn get(&self, path: &str) -> io::Result<Option<Vec<u8>>> {
        match fs::read(self.resolve(path)?) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn delete(&self, path: &str) -> io::Result<bool> {
        match fs::remove_file(self.resolve(path)?) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e),
        }
    }

    fn list(&self) -> io::Result<Vec<BlobMeta>> {
        let mut out = Vec::new();
        walk(&self.root, &self.root, &mut out)?;
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<BlobMeta>) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        if name.to_string_lossy().starts_with(".tmp-") {
            continue;
        }
        let ft = entry.file_type()?;
        if ft.is_dir() {
            walk(root, &entry.path(), out)?;
        } else if ft.is_file() {
            let meta = entry.metadata()?;
            let created_at = meta
                .modified()?
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let rel = entry
                .path()
                .strip_prefix(root)
                .expect("walked under root")
                .to_string_lossy()
                .replace(std::path::MAIN_SEPARATOR, "/");
            out.push(BlobMeta {
                path: rel,
                len: meta.len(),
                created_at,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use proptest::prelude::*;

    #[test]
    fn put_get_list_delete() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(ManualClock::new(1_000));
        let s = FsBlobStore::open(dir.path(), clock.clone()).unwrap();
        s.put("objects/o1/mp4/v1", b"hello").unwrap();
        clock.advance(5);
        s.put("objects/o1/mp4/v2", b"world!").unwrap();
        assert_eq!(s.get("objects/o1/mp4/v1").unwrap().unwrap(), b"hello");
        assert_eq!(s.get("objects/o1/mp4/v9").unwrap(), None);
        let l = s.list().unwrap();
        assert_eq!(
            l,
            vec![
                BlobMeta { path: "objects/o1/mp4/v1".into(), len: 5, created_at: 1_000 },
                BlobMeta { path: "objects/o1/mp4/v2".into(), len: 6, created_at: 1_005 },
            ]
        );
        assert!(s.delete("objects/o1/mp4/v1").unwrap());
        assert!(!s.delete("objects/o1/mp4/v1").unwrap());
    }

    #[test]
    fn rejects_escaping_paths() {
        let dir = tempfile::tempdir().unwrap();
        let s = FsBlobStore::open(dir.path(), Arc::new(ManualClock::new(0))).unwrap();
        assert!(s.put("objects/../x", b"").is_err());
        assert!(s.put("/etc/passwd", b"").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn content_fidelity(bytes in proptest::collection::vec(any::<u8>(), 0..4096)) {
            let dir = tempfile::tempdir().unwrap();
            let s = FsBlobStore::open(dir.path(), Arc::new(ManualClock::new(0))).unwrap();
            s.put("objects/o/k/v", &bytes).unwrap();
            prop_assert_eq!(s.get("objects/o/k/v").unwrap().unwrap(), bytes);
        }
    }
}
