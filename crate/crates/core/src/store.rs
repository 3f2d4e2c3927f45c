//! Persistent structured-state store behind the data grid.
//!
//! Writes are conditional on revision: a record is only written if the store
//! does not already hold the same or a newer revision of that object, so a
//! delayed write-behind batch can never roll a record back.
//!
//! # File layout (`FileDocStore`)
//!
//! Two files in the store directory, `snapshot.bin` and `records.log`, each
//! starting with the 8-byte magic `OPRCDOC1` followed by frames:
//!
//! ```text
//! frame  := len:u32le crc32:u32le body[len]        (crc over body)
//! body   := revision:u64le flags:u8 n:u16le (partition:u32le offset:u64le){n}
//!           id_len:u16le id[id_len] json_len:u32le json[json_len]
//! flags  := bit 0 = tombstone
//! json   := canonical JSON (sorted keys) of {"classRef","doc","fileVersions"}
//! ```
//!
//! Recovery loads the snapshot, then replays the log; a torn or corrupt tail
//! frame in the log is truncated. `compact` rewrites the snapshot with the
//! latest record per object and resets the log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ids::ObjectId;
use crate::record::ObjectRecord;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("persistent store unavailable: {0}")]
    Unavailable(String),
    #[error("store io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt store record: {0}")]
    Corrupt(String),
}

pub trait DocumentStore: Send + Sync {
    fn get(&self, id: &ObjectId) -> Result<Option<ObjectRecord>, StoreError>;

    /// Writes every record whose revision is newer than the stored one.
    /// Returns how many were written.
    fn put_batch(&self, records: &[ObjectRecord]) -> Result<usize, StoreError>;

    fn scan(&self) -> Result<Vec<ObjectRecord>, StoreError>;
}

/// In-memory store with a write log and an outage switch, for tests.
#[derive(Default)]
pub struct MemStore {
    records: Mutex<BTreeMap<ObjectId, ObjectRecord>>,
    writes: Mutex<Vec<(ObjectId, u64)>>,
    down: AtomicBool,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_available(&self, up: bool) {
        self.down.store(!up, Ordering::SeqCst);
    }

    /// Every (object, revision) written so far, in write order.
    pub fn write_log(&self) -> Vec<(ObjectId, u64)> {
        self.writes.lock().clone()
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.down.load(Ordering::SeqCst) {
            Err(StoreError::Unavailable("store marked down".into()))
        } else {
            Ok(())
        }
    }
}

impl DocumentStore for MemStore {
    fn get(&self, id: &ObjectId) -> Result<Option<ObjectRecord>, StoreError> {
        self.check()?;
        Ok(self.records.lock().get(id).cloned())
    }

    fn put_batch(&self, records: &[ObjectRecord]) -> Result<usize, StoreError> {
        self.check()?;
        let mut map = self.records.lock();
        let mut writes = self.writes.lock();
        let mut n = 0;
        for r in records {
            if map.get(&r.id).is_some_and(|cur| cur.revision >= r.revision) {
                continue;
            }
            writes.push((r.id.clone(), r.revision));
            map.insert(r.id.clone(), r.clone());
            n += 1;
        }
        Ok(n)
    }

    fn scan(&self) -> Result<Vec<ObjectRecord>, StoreError> {
        self.check()?;
        Ok(self.records.lock().values().cloned().collect())
    }
}

const DOC_MAGIC: &[u8; 8] = b"OPRCDOC1";
const SNAPSHOT: &str = "snapshot.bin";
const LOG: &str = "records.log";

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct DocBody {
    class_ref: String,
    doc: Value,
    file_versions: BTreeMap<String, String>,
}

pub fn encode_record(r: &ObjectRecord) -> Vec<u8> {
    let json = serde_json::to_vec(&DocBody {
        class_ref: r.class_ref.clone(),
        doc: r.doc.clone(),
        file_versions: r.file_versions.clone(),
    })
    .expect("json values always serialize");
    let id = r.id.as_str().as_bytes();
    let mut body = Vec::with_capacity(32 + id.len() + json.len() + 12 * r.last_offset.len());
    body.extend_from_slice(&r.revision.to_le_bytes());
    body.push(u8::from(r.tombstone));
    body.extend_from_slice(&(r.last_offset.len() as u16).to_le_bytes());
    for (p, o) in &r.last_offset {
        body.extend_from_slice(&p.to_le_bytes());
        body.extend_from_slice(&o.to_le_bytes());
    }
    body.extend_from_slice(&(id.len() as u16).to_le_bytes());
    body.extend_from_slice(id);
    body.extend_from_slice(&(json.len() as u32).to_le_bytes());
    body.extend_from_slice(&json);
    body
}

pub fn decode_record(body: &[u8]) -> Result<ObjectRecord, StoreError> {
    let mut cur = Cursor { buf: body, pos: 0 };
    let revision = cur.u64()?;
    let flags = cur.take(1)?[0];
    let n = cur.u16()? as usize;
    let mut last_offset = BTreeMap::new();
    for _ in 0..n {
        let p = cur.u32()?;
        let o = cur.u64()?;
        last_offset.insert(p, o);
    }
    let id_len = cur.u16()? as usize;
    let id = std::str::from_utf8(cur.take(id_len)?)
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
    let id = ObjectId::new(id).map_err(|e| StoreError::Corrupt(e.to_string()))?;
    let json_len = cur.u32()? as usize;
    let body: DocBody = serde_json::from_slice(cur.take(json_len)?)
        .map_err(|e| StoreError::Corrupt(e.to_string()))?;
    Ok(ObjectRecord {
        id,
        class_ref: body.class_ref,
        doc: body.doc,
        file_versions: body.file_versions,
        revision,
        last_offset,
        tombstone: flags & 1 == 1,
    })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StoreError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| StoreError::Corrupt("truncated record body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16, StoreError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes `len crc body` for one frame.
pub(crate) fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    w.write_all(&(body.len() as u32).to_le_bytes())?;
    w.write_all(&crc32fast::hash(body).to_le_bytes())?;
    w.write_all(body)
}

/// Reads frames until EOF or the first torn/corrupt frame. Returns the
/// bodies and the byte position just past the last good frame.
pub(crate) fn read_frames(r: &mut impl Read, start: u64) -> io::Result<(Vec<Vec<u8>>, u64)> {
    let mut out = Vec::new();
    let mut pos = start;
    loop {
        let mut hdr = [0u8; 8];
        match read_full(r, &mut hdr)? {
            0 => break,
            8 => {}
            _ => break,
        }
        let len = u32::from_le_bytes(hdr[..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(hdr[4..].try_into().unwrap());
        if len > 64 << 20 {
            break;
        }
        let mut body = vec![0u8; len];
        if read_full(r, &mut body)? != len || crc32fast::hash(&body) != crc {
            break;
        }
        pos += 8 + len as u64;
        out.push(body);
    }
    Ok((out, pos))
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// File-backed store: append-only record log plus a snapshot. The latest
/// record of every object is also kept in memory.
pub struct FileDocStore {
    dir: PathBuf,
    inner: Mutex<FileInner>,
}

struct FileInner {
    log: File,
    latest: HashMap<ObjectId, ObjectRecord>,
}

impl FileDocStore {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut latest = HashMap::new();
        let snap = dir.join(SNAPSHOT);
        if snap.exists() {
            let mut r = BufReader::new(File::open(&snap)?);
            expect_magic(&mut r)?;
            let (bodies, _) = read_frames(&mut r, DOC_MAGIC.len() as u64)?;
            for b in bodies {
                let rec = decode_record(&b)?;
                latest.insert(rec.id.clone(), rec);
            }
        }
        let log_path = dir.join(LOG);
        let mut log = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&log_path)?;
        if log.metadata()?.len() == 0 {
            log.write_all(DOC_MAGIC)?;
            log.sync_data()?;
        } else {
            log.seek(SeekFrom::Start(0))?;
            let mut r = BufReader::new(&log);
            expect_magic(&mut r)?;
            let (bodies, good) = read_frames(&mut r, DOC_MAGIC.len() as u64)?;
            for b in bodies {
                let rec = decode_record(&b)?;
                let newer = latest
                    .get(&rec.id)
                    .map_or(true, |cur: &ObjectRecord| cur.revision < rec.revision);
                if newer {
                    latest.insert(rec.id.clone(), rec);
                }
            }
            if good < log.metadata()?.len() {
                tracing::warn!(path = %log_path.display(), good, "truncating torn record log tail");
                log.set_len(good)?;
                log.sync_data()?;
            }
        }
        Ok(Self {
            dir,
            inner: Mutex::new(FileInner { log, latest }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Rewrites the snapshot from the latest records and empties the log.
    pub fn compact(&self) -> Result<(), StoreError> {
        let inner = self.inner.lock();
        let tmp = self.dir.join("snapshot.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(DOC_MAGIC)?;
            let mut ids: Vec<_> = inner.latest.keys().cloned().collect();
            ids.sort();
            for id in ids {
                write_frame(&mut w, &encode_record(&inner.latest[&id]))?;
            }
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        std::fs::rename(&tmp, self.dir.join(SNAPSHOT))?;
        inner.log.set_len(DOC_MAGIC.len() as u64)?;
        inner.log.sync_data()?;
        Ok(())
    }
}

fn expect_magic(r: &mut impl Read) -> Result<(), StoreError> {
    let mut m = [0u8; 8];
    if read_full(r, &mut m)? != 8 || &m != DOC_MAGIC {
        return Err(StoreError::Corrupt("bad document store magic".into()));
    }
    Ok(())
}

impl DocumentStore for FileDocStore {
    fn get(&self, id: &ObjectId) -> Result<Option<ObjectRecord>, StoreError> {
        Ok(self.inner.lock().latest.get(id).cloned())
    }

    fn put_batch(&self, records: &[ObjectRecord]) -> Result<usize, StoreError> {
        let mut inner = self.inner.lock();
        let fresh: Vec<&ObjectRecord> = records
            .iter()
            .filter(|r| {
                inner
                    .latest
                    .get(&r.id)
                    .map_or(true, |cur| cur.revision < r.revision)
            })
            .collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        let mut buf = Vec::new();
        for r in &fresh {
            write_frame(&mut buf, &encode_record(r))?;
        }
        inner.log.write_all(&buf)?;
        inner.log.sync_data()?;
        for r in &fresh {
            inner.latest.insert(r.id.clone(), (*r).clone());
        }
        Ok(fresh.len())
    }

    fn scan(&self) -> Result<Vec<ObjectRecord>, StoreError> {
        let inner = self.inner.lock();
        let mut v: Vec<_> = inner.latest.values().cloned().collect();
        v.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(v)
    }
}
