//! Embedded partitioned append log.
//!
//! Each partition is one append-only file. Appends carry a dedupe key (the
//! invocation id); re-appending a key still inside the dedupe window returns
//! the original offset instead of writing a second entry. Consumers poll by
//! offset and acknowledge; the highest acknowledged offset survives restarts
//! so unacknowledged entries are delivered again.
//!
//! # Partition file format
//!
//! ```text
//! file    := header frame*
//! header  := magic "OPRCLOG1" (8 bytes) version:u32le (=1) partition:u32le
//! frame   := len:u32le crc32:u32le body[len]       (crc32/IEEE over body)
//! body    := offset:u64le key_len:u16le key[key_len] payload
//! ```
//!
//! Offsets are dense from 0. A torn or corrupt frame at the tail is
//! truncated on open. The consumer cursor lives next to the partition file
//! in `partition-NNNNN.cursor` as `offset:u64le crc32:u32le` (crc over the
//! offset bytes); a missing file means nothing has been acknowledged.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::record::PartitionId;
use crate::ring::hash64;
use crate::store::{read_frames, write_frame};

pub const LOG_MAGIC: &[u8; 8] = b"OPRCLOG1";
pub const LOG_VERSION: u32 = 1;
pub const DEFAULT_PARTITIONS: u32 = 16;
pub const DEFAULT_DEDUPE_WINDOW: usize = 65_536;
const HEADER_LEN: u64 = 16;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] io::Error),
    #[error("no partition {0}")]
    NoPartition(PartitionId),
    #[error("corrupt log file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub offset: u64,
    pub dedupe_key: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Appended {
    pub offset: u64,
    /// The key was already in the window; nothing new was written.
    pub duplicate: bool,
}

#[derive(Debug, Clone)]
pub struct LogConfig {
    pub partitions: u32,
    pub dedupe_window: usize,
    /// fsync appends and cursor updates.
    pub fsync: bool,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            partitions: DEFAULT_PARTITIONS,
            dedupe_window: DEFAULT_DEDUPE_WINDOW,
            fsync: true,
        }
    }
}

/// Partition a key maps to: `hash64(key) mod partitions`.
pub fn partition_for(key: &str, partitions: u32) -> PartitionId {
    (hash64(key.as_bytes()) % partitions as u64) as PartitionId
}

struct PartitionState {
    file: File,
    len: u64,
    entries: Vec<Arc<LogEntry>>,
    dedupe: HashMap<String, u64>,
    dedupe_order: VecDeque<String>,
    cursor: Option<u64>,
}

struct SyncState {
    synced_len: u64,
}

struct Partition {
    id: PartitionId,
    cursor_path: PathBuf,
    state: Mutex<PartitionState>,
    sync: Mutex<SyncState>,
    /// Entries below this count are durable and visible to consumers.
    durable: Mutex<usize>,
}

pub struct MessageLog {
    dir: PathBuf,
    config: LogConfig,
    partitions: Vec<Partition>,
}

impl MessageLog {
    pub fn open(dir: impl AsRef<Path>, config: LogConfig) -> Result<Self, LogError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let partitions = (0..config.partitions)
            .map(|p| open_partition(&dir, p, &config))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            dir,
            config,
            partitions,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn partition_count(&self) -> u32 {
        self.config.partitions
    }

    pub fn partition_for(&self, key: &str) -> PartitionId {
        partition_for(key, self.config.partitions)
    }

    fn partition(&self, p: PartitionId) -> Result<&Partition, LogError> {
        self.partitions
            .get(p as usize)
            .ok_or(LogError::NoPartition(p))
    }

    /// Appends `payload` unless `dedupe_key` is already in the window, and
    /// returns once the entry is durable.
    pub fn append(&self, p: PartitionId, payload: &[u8], dedupe_key: &str) -> Result<Appended, LogError> {
        let part = self.partition(p)?;
        let outcome = {
            let mut st = part.state.lock();
            if let Some(&offset) = st.dedupe.get(dedupe_key) {
                Appended {
                    offset,
                    duplicate: true,
                }
            } else {
                let offset = st.entries.len() as u64;
                let mut body = Vec::with_capacity(10 + dedupe_key.len() + payload.len());
                body.extend_from_slice(&offset.to_le_bytes());
                body.extend_from_slice(&(dedupe_key.len() as u16).to_le_bytes());
                body.extend_from_slice(dedupe_key.as_bytes());
                body.extend_from_slice(payload);
                let mut frame = Vec::with_capacity(body.len() + 8);
                write_frame(&mut frame, &body)?;
                st.file.write_all(&frame)?;
                st.len += frame.len() as u64;
                st.entries.push(Arc::new(LogEntry {
                    offset,
                    dedupe_key: dedupe_key.to_string(),
                    payload: payload.to_vec(),
                }));
                remember(&mut st, dedupe_key.to_string(), offset, self.config.dedupe_window);
                Appended {
                    offset,
                    duplicate: false,
                }
            }
        };
        self.sync_partition(part)?;
        Ok(outcome)
    }

    /// Group commit: one fsync covers every append written before it, so
    /// concurrent appenders share syncs.
    fn sync_partition(&self, part: &Partition) -> Result<(), LogError> {
        let mut sync = part.sync.lock();
        let (len, count, file) = {
            let st = part.state.lock();
            (st.len, st.entries.len(), st.file.try_clone()?)
        };
        if sync.synced_len < len {
            if self.config.fsync {
                file.sync_data()?;
            }
            sync.synced_len = len;
        }
        let mut durable = part.durable.lock();
        *durable = (*durable).max(count);
        Ok(())
    }

    /// Up to `max` durable entries with offset >= `from`, in offset order.
    pub fn poll(&self, p: PartitionId, from: u64, max: usize) -> Result<Vec<Arc<LogEntry>>, LogError> {
        let part = self.partition(p)?;
        let visible = *part.durable.lock();
        let st = part.state.lock();
        let start = (from as usize).min(visible);
        let end = start.saturating_add(max).min(visible);
        Ok(st.entries[start..end].to_vec())
    }

    /// Advances the committed cursor to `offset` if that is higher. Offsets
    /// past the end of the partition are ignored.
    pub fn ack(&self, p: PartitionId, offset: u64) -> Result<(), LogError> {
        let part = self.partition(p)?;
        let mut st = part.state.lock();
        if offset >= st.entries.len() as u64 || st.cursor.is_some_and(|c| c >= offset) {
            return Ok(());
        }
        write_cursor(&part.cursor_path, offset, self.config.fsync)?;
        st.cursor = Some(offset);
        Ok(())
    }

    /// Highest acknowledged offset.
    pub fn committed(&self, p: PartitionId) -> Result<Option<u64>, LogError> {
        Ok(self.partition(p)?.state.lock().cursor)
    }

    /// Where a restarted consumer resumes: one past the committed cursor.
    pub fn resume_offset(&self, p: PartitionId) -> Result<u64, LogError> {
        Ok(self.committed(p)?.map_or(0, |c| c + 1))
    }

    pub fn len(&self, p: PartitionId) -> Result<u64, LogError> {
        Ok(self.partition(p)?.state.lock().entries.len() as u64)
    }

    pub fn is_empty(&self, p: PartitionId) -> Result<bool, LogError> {
        Ok(self.len(p)? == 0)
    }

    pub fn partition_path(&self, p: PartitionId) -> PathBuf {
        partition_file(&self.dir, p)
    }

    pub fn partition_ids(&self) -> impl Iterator<Item = PartitionId> + '_ {
        self.partitions.iter().map(|p| p.id)
    }
}

fn remember(st: &mut PartitionState, key: String, offset: u64, window: usize) {
    st.dedupe.insert(key.clone(), offset);
    st.dedupe_order.push_back(key);
    while st.dedupe_order.len() > window {
        if let Some(old) = st.dedupe_order.pop_front() {
            // a key is only forgotten if this was its latest occurrence
            if st.dedupe.get(&old).is_some_and(|o| *o < offset.saturating_sub(window as u64 - 1)) {
                st.dedupe.remove(&old);
            }
        }
    }
}

fn partition_file(dir: &Path, p: PartitionId) -> PathBuf {
    dir.join(format!("partition-{p:05}.log"))
}

fn cursor_file(dir: &Path, p: PartitionId) -> PathBuf {
    dir.join(format!("partition-{p:05}.cursor"))
}

fn write_cursor(path: &Path, offset: u64, fsync: bool) -> io::Result<()> {
    let tmp = path.with_extension("cursor.tmp");
    {
        let mut f = File::create(&tmp)?;
        let bytes = offset.to_le_bytes();
        f.write_all(&bytes)?;
        f.write_all(&crc32fast::hash(&bytes).to_le_bytes())?;
        if fsync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)
}

fn read_cursor(path: &Path) -> Result<Option<u64>, LogError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() != 12 || crc32fast::hash(&bytes[..8]).to_le_bytes() != bytes[8..12] {
        return Err(LogError::Corrupt(format!("bad cursor file {}", path.display())));
    }
    Ok(Some(u64::from_le_bytes(bytes[..8].try_into().unwrap())))
}

fn header(p: PartitionId) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..8].copy_from_slice(LOG_MAGIC);
    h[8..12].copy_from_slice(&LOG_VERSION.to_le_bytes());
    h[12..16].copy_from_slice(&p.to_le_bytes());
    h
}

fn decode_entry(body: &[u8]) -> Result<LogEntry, LogError> {
    let bad = || LogError::Corrupt("short log entry".into());
    if body.len() < 10 {
        return Err(bad());
    }
    let offset = u64::from_le_bytes(body[..8].try_into().unwrap());
    let klen = u16::from_le_bytes(body[8..10].try_into().unwrap()) as usize;
    let key = body.get(10..10 + klen).ok_or_else(bad)?;
    Ok(LogEntry {
        offset,
        dedupe_key: String::from_utf8(key.to_vec()).map_err(|e| LogError::Corrupt(e.to_string()))?,
        payload: body[10 + klen..].to_vec(),
    })
}

/// Result of reading one partition file without opening a log.
#[derive(Debug)]
pub struct PartitionDump {
    pub partition: PartitionId,
    pub version: u32,
    pub entries: Vec<LogEntry>,
    /// Bytes after the last intact frame.
    pub torn_tail_bytes: u64,
}

/// Reads a partition file for inspection. Does not modify it.
pub fn dump_partition_file(path: &Path) -> Result<PartitionDump, LogError> {
    let mut f = File::open(path)?;
    let total = f.metadata()?.len();
    let mut h = [0u8; HEADER_LEN as usize];
    f.read_exact(&mut h)
        .map_err(|_| LogError::Corrupt("short header".into()))?;
    if &h[..8] != LOG_MAGIC {
        return Err(LogError::Corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(h[8..12].try_into().unwrap());
    let partition = u32::from_le_bytes(h[12..16].try_into().unwrap());
    let (bodies, good) = read_frames(&mut BufReader::new(f), HEADER_LEN)?;
    let entries = bodies
        .iter()
        .map(|b| decode_entry(b))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PartitionDump {
        partition,
        version,
        entries,
        torn_tail_bytes: total - good,
    })
}

fn open_partition(dir: &Path, p: PartitionId, config: &LogConfig) -> Result<Partition, LogError> {
    let path = partition_file(dir, p);
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(&path)?;
    let mut entries = Vec::new();
    let mut len = file.metadata()?.len();
    if len == 0 {
        file.write_all(&header(p))?;
        if config.fsync {
            file.sync_all()?;
        }
        len = HEADER_LEN;
    } else {
        file.seek(SeekFrom::Start(0))?;
        let mut r = BufReader::new(&file);
        let mut h = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut h)
            .map_err(|_| LogError::Corrupt(format!("short header in {}", path.display())))?;
        if h != header(p) {
            return Err(LogError::Corrupt(format!("bad header in {}", path.display())));
        }
        let (bodies, good) = read_frames(&mut r, HEADER_LEN)?;
        for b in bodies {
            let e = decode_entry(&b)?;
            if e.offset != entries.len() as u64 {
                return Err(LogError::Corrupt(format!(
                    "offset gap in {}: found {} expected {}",
                    path.display(),
                    e.offset,
                    entries.len()
                )));
            }
            entries.push(Arc::new(e));
        }
        if good < len {
            tracing::warn!(path = %path.display(), good, len, "truncating torn log tail");
            file.set_len(good)?;
            file.sync_all()?;
            len = good;
        }
    }
    let mut st = PartitionState {
        file,
        len,
        entries: Vec::new(),
        dedupe: HashMap::new(),
        dedupe_order: VecDeque::new(),
        cursor: None,
    };
    let skip = entries.len().saturating_sub(config.dedupe_window);
    for e in &entries[skip..] {
        remember(&mut st, e.dedupe_key.clone(), e.offset, config.dedupe_window);
    }
    let count = entries.len();
    st.entries = entries;
    let cursor_path = cursor_file(dir, p);
    st.cursor = read_cursor(&cursor_path)?.filter(|c| *c < count as u64);
    Ok(Partition {
        id: p,
        cursor_path,
        state: Mutex::new(st),
        sync: Mutex::new(SyncState { synced_len: len }),
        durable: Mutex::new(count),
    })
}
