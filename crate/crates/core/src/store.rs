//! Embedded file-backed persistence: append-only stream logs, versioned
//! snapshot documents and content-addressed blobs.
//!
//! Layout under the data directory (see `docs/STORAGE.md` for the bit-level
//! format):
//!
//! ```text
//! <root>/streams/<kind>/<id>.log      append-only record log
//! <root>/snapshots/<kind>/<id>.json   latest version of a document
//! <root>/blobs/<sha256>               immutable content-addressed objects
//! ```
//!
//! Log records are length-prefixed and CRC-32 checked. A torn final record
//! (crash between write and flush) is truncated away on open; damage anywhere
//! else surfaces as [`StoreError::Corrupt`].

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, TimeZone, Utc};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::SharedClock;

pub const LOG_MAGIC: [u8; 4] = *b"TCLG";
pub const LOG_FORMAT_VERSION: u16 = 1;
pub const RECORD_VERSION: u8 = 1;
pub const FILE_HEADER_LEN: u64 = 8;
/// length (4) + crc (4) + record version (1) + timestamp (8)
pub const RECORD_HEADER_LEN: u64 = 17;
/// Upper bound on a single record payload; larger length prefixes are treated as damage.
pub const MAX_RECORD_LEN: u32 = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage unavailable: {0}")]
    StorageUnavailable(#[from] io::Error),
    #[error("corrupt record in {stream} at offset {offset}: {reason}")]
    Corrupt {
        stream: String,
        offset: u64,
        reason: String,
    },
    #[error("{kind}/{id} not found")]
    NotFound { kind: String, id: String },
    #[error("record encoding: {0}")]
    Encoding(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamKey {
    pub kind: String,
    pub id: String,
}

impl StreamKey {
    pub fn new(kind: impl Into<String>, id: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            id: id.into(),
        }
    }
}

impl std::fmt::Display for StreamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.kind, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoredRecord {
    pub offset: u64,
    pub written_at: DateTime<Utc>,
    pub payload: Vec<u8>,
}

impl StoredRecord {
    pub fn decode<T: DeserializeOwned>(&self) -> Result<T, StoreError> {
        Ok(serde_json::from_slice(&self.payload)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u64,
    pub updated_at: DateTime<Utc>,
    pub document: T,
}

/// Whether appends are fsynced before acknowledgement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Durability {
    #[default]
    Fsync,
    /// Written to the OS but not synced. Survives process death, not power loss.
    Flush,
}

/// Encodes one record, header included.
pub fn encode_record(written_at: DateTime<Utc>, payload: &[u8]) -> Vec<u8> {
    let mut body = Vec::with_capacity(9 + payload.len());
    body.push(RECORD_VERSION);
    body.extend_from_slice(&written_at.timestamp_millis().to_le_bytes());
    body.extend_from_slice(payload);
    let crc = crc32fast::hash(&body);
    let mut out = Vec::with_capacity(8 + body.len());
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&body);
    out
}

fn file_header() -> [u8; 8] {
    let mut h = [0u8; 8];
    h[..4].copy_from_slice(&LOG_MAGIC);
    h[4..6].copy_from_slice(&LOG_FORMAT_VERSION.to_le_bytes());
    h
}

/// Ids are used verbatim as file names when they are plain; anything else is
/// hex-encoded behind an `x` prefix so it cannot escape the directory.
fn file_stem(id: &str) -> String {
    let plain = !id.is_empty()
        && !id.starts_with('.')
        && !id.starts_with('x')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.');
    if plain {
        id.to_string()
    } else {
        format!("x{}", hex::encode(id.as_bytes()))
    }
}

fn id_from_stem(stem: &str) -> Option<String> {
    match stem.strip_prefix('x') {
        Some(h) => hex::decode(h).ok().and_then(|b| String::from_utf8(b).ok()),
        None => Some(stem.to_string()),
    }
}

#[derive(Debug)]
enum Damage {
    None,
    At { offset: u64, reason: String },
}

#[derive(Debug)]
struct StreamFile {
    key: StreamKey,
    file: File,
    /// Byte position of each committed record.
    positions: Vec<u64>,
    end: u64,
    damage: Damage,
}

impl StreamFile {
    fn open(key: StreamKey, path: &Path) -> Result<Self, StoreError> {
        let exists = path.exists();
        if !exists {
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(path)?;
        let len = file.metadata()?.len();
        if len < FILE_HEADER_LEN {
            // New file, or a crash before the header was complete.
            file.set_len(0)?;
            file.seek(SeekFrom::Start(0))?;
            file.write_all(&file_header())?;
            file.sync_all()?;
            return Ok(Self {
                key,
                file,
                positions: Vec::new(),
                end: FILE_HEADER_LEN,
                damage: Damage::None,
            });
        }
        let mut bytes = Vec::with_capacity(len as usize);
        file.seek(SeekFrom::Start(0))?;
        file.read_to_end(&mut bytes)?;
        if bytes[..4] != LOG_MAGIC {
            return Err(StoreError::Corrupt {
                stream: key.to_string(),
                offset: 0,
                reason: "bad file magic".into(),
            });
        }
        let scan = scan_records(&bytes);
        let mut this = Self {
            key,
            file,
            positions: scan.positions,
            end: scan.valid_end,
            damage: Damage::None,
        };
        match scan.tail {
            Tail::Clean => {}
            Tail::Torn => {
                this.file.set_len(scan.valid_end)?;
                this.file.sync_all()?;
                tracing::warn!(stream = %this.key, kept = this.positions.len(), "truncated torn tail record");
            }
            Tail::Damaged(reason) => {
                this.damage = Damage::At {
                    offset: this.positions.len() as u64,
                    reason,
                };
            }
        }
        Ok(this)
    }

    fn check_damage(&self, offset: u64) -> Result<(), StoreError> {
        if let Damage::At {
            offset: bad,
            reason,
        } = &self.damage
        {
            if offset >= *bad {
                return Err(StoreError::Corrupt {
                    stream: self.key.to_string(),
                    offset: *bad,
                    reason: reason.clone(),
                });
            }
        }
        Ok(())
    }

    fn append(
        &mut self,
        written_at: DateTime<Utc>,
        payload: &[u8],
        durability: Durability,
    ) -> Result<u64, StoreError> {
        if let Damage::At { .. } = self.damage {
            self.check_damage(u64::MAX)?;
        }
        let rec = encode_record(written_at, payload);
        self.file.write_all_at(&rec, self.end)?;
        match durability {
            Durability::Fsync => self.file.sync_data()?,
            Durability::Flush => self.file.flush()?,
        }
        let offset = self.positions.len() as u64;
        self.positions.push(self.end);
        self.end += rec.len() as u64;
        Ok(offset)
    }
}

enum Tail {
    Clean,
    Torn,
    Damaged(String),
}

struct Scan {
    positions: Vec<u64>,
    valid_end: u64,
    tail: Tail,
}

/// Walks the records of a whole log image. A record that fails to parse and
/// reaches (or passes) end-of-file is a torn write; one followed by further
/// bytes is damage.
fn scan_records(bytes: &[u8]) -> Scan {
    let total = bytes.len() as u64;
    let mut pos = FILE_HEADER_LEN;
    let mut positions = Vec::new();
    loop {
        if pos == total {
            return Scan {
                positions,
                valid_end: pos,
                tail: Tail::Clean,
            };
        }
        match check_record_at(bytes, pos) {
            Ok(next) => {
                positions.push(pos);
                pos = next;
            }
            Err((reaches_eof, reason)) => {
                let tail = if reaches_eof {
                    Tail::Torn
                } else {
                    Tail::Damaged(reason)
                };
                return Scan {
                    positions,
                    valid_end: pos,
                    tail,
                };
            }
        }
    }
}

/// Returns the position after the record, or (record reaches EOF, reason).
fn check_record_at(bytes: &[u8], pos: u64) -> Result<u64, (bool, String)> {
    let total = bytes.len() as u64;
    if pos + RECORD_HEADER_LEN > total {
        return Err((true, "truncated header".into()));
    }
    let p = pos as usize;
    let len = u32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
    let crc = u32::from_le_bytes(bytes[p + 4..p + 8].try_into().unwrap());
    if len > MAX_RECORD_LEN {
        return Err((false, format!("length prefix {len} exceeds limit")));
    }
    let end = pos + RECORD_HEADER_LEN + len as u64;
    if end > total {
        return Err((true, "truncated payload".into()));
    }
    let body = &bytes[p + 8..end as usize];
    if crc32fast::hash(body) != crc {
        return Err((end == total, "checksum mismatch".into()));
    }
    if body[0] != RECORD_VERSION {
        return Err((false, format!("unsupported record version {}", body[0])));
    }
    Ok(end)
}

fn decode_body(key: &StreamKey, offset: u64, raw: &[u8]) -> Result<StoredRecord, StoreError> {
    let corrupt = |reason: &str| StoreError::Corrupt {
        stream: key.to_string(),
        offset,
        reason: reason.to_string(),
    };
    if raw.len() < RECORD_HEADER_LEN as usize {
        return Err(corrupt("short record"));
    }
    let len = u32::from_le_bytes(raw[..4].try_into().unwrap()) as usize;
    let crc = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if raw.len() != RECORD_HEADER_LEN as usize + len {
        return Err(corrupt("length prefix mismatch"));
    }
    let body = &raw[8..];
    if crc32fast::hash(body) != crc {
        return Err(corrupt("checksum mismatch"));
    }
    let ms = i64::from_le_bytes(body[1..9].try_into().unwrap());
    let written_at = Utc
        .timestamp_millis_opt(ms)
        .single()
        .ok_or_else(|| corrupt("timestamp out of range"))?;
    Ok(StoredRecord {
        offset,
        written_at,
        payload: body[9..].to_vec(),
    })
}

#[derive(Debug)]
pub struct EmrStore {
    root: PathBuf,
    clock: SharedClock,
    durability: Durability,
    streams: RwLock<HashMap<StreamKey, Arc<Mutex<StreamFile>>>>,
    snapshot_lock: Mutex<()>,
}

impl EmrStore {
    pub fn open(
        root: impl Into<PathBuf>,
        clock: SharedClock,
        durability: Durability,
    ) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["streams", "snapshots", "blobs"] {
            fs::create_dir_all(root.join(sub))?;
        }
        // Fail fast on read-only directories instead of at the first append.
        let probe = root.join(".write-check");
        fs::write(&probe, b"ok")?;
        fs::remove_file(&probe)?;
        Ok(Self {
            root,
            clock,
            durability,
            streams: RwLock::new(HashMap::new()),
            snapshot_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stream_path(&self, key: &StreamKey) -> PathBuf {
        self.root
            .join("streams")
            .join(file_stem(&key.kind))
            .join(format!("{}.log", file_stem(&key.id)))
    }

    fn snapshot_path(&self, kind: &str, id: &str) -> PathBuf {
        self.root
            .join("snapshots")
            .join(file_stem(kind))
            .join(format!("{}.json", file_stem(id)))
    }

    fn stream(&self, key: &StreamKey) -> Result<Arc<Mutex<StreamFile>>, StoreError> {
        if let Some(s) = self.streams.read().get(key) {
            return Ok(s.clone());
        }
        let mut streams = self.streams.write();
        if let Some(s) = streams.get(key) {
            return Ok(s.clone());
        }
        let s = Arc::new(Mutex::new(StreamFile::open(
            key.clone(),
            &self.stream_path(key),
        )?));
        streams.insert(key.clone(), s.clone());
        Ok(s)
    }

    /// Appends a record and returns its offset. Durable before returning.
    pub fn append(&self, key: &StreamKey, payload: &[u8]) -> Result<u64, StoreError> {
        let stream = self.stream(key)?;
        let now = self.clock.now();
        let mut s = stream.lock();
        s.append(now, payload, self.durability)
    }

    pub fn append_json<T: Serialize>(
        &self,
        key: &StreamKey,
        record: &T,
    ) -> Result<u64, StoreError> {
        self.append(key, &serde_json::to_vec(record)?)
    }

    pub fn len(&self, key: &StreamKey) -> Result<u64, StoreError> {
        if !self.stream_exists(key) {
            return Ok(0);
        }
        Ok(self.stream(key)?.lock().positions.len() as u64)
    }

    fn stream_exists(&self, key: &StreamKey) -> bool {
        self.streams.read().contains_key(key) || self.stream_path(key).exists()
    }

    /// Records `[from, from + limit)`. Unknown streams read as empty.
    pub fn read(
        &self,
        key: &StreamKey,
        from: u64,
        limit: usize,
    ) -> Result<Vec<StoredRecord>, StoreError> {
        if !self.stream_exists(key) {
            return Ok(Vec::new());
        }
        let stream = self.stream(key)?;
        // Copy the committed extent under the lock; read bytes outside it.
        let (file, spans) = {
            let s = stream.lock();
            let n = s.positions.len() as u64;
            if from >= n {
                s.check_damage(from)?;
                return Ok(Vec::new());
            }
            let to = n.min(from.saturating_add(limit as u64));
            let spans: Vec<(u64, u64, u64)> = (from..to)
                .map(|i| {
                    let start = s.positions[i as usize];
                    let end = s.positions.get(i as usize + 1).copied().unwrap_or(s.end);
                    (i, start, end)
                })
                .collect();
            if to as usize == s.positions.len() && limit as u64 > to - from {
                s.check_damage(to)?;
            }
            (s.file.try_clone()?, spans)
        };
        let mut out = Vec::with_capacity(spans.len());
        for (offset, start, end) in spans {
            let mut raw = vec![0u8; (end - start) as usize];
            file.read_exact_at(&mut raw, start)?;
            out.push(decode_body(key, offset, &raw)?);
        }
        Ok(out)
    }

    pub fn read_all(&self, key: &StreamKey) -> Result<Vec<StoredRecord>, StoreError> {
        self.read(key, 0, usize::MAX)
    }

    pub fn read_all_json<T: DeserializeOwned>(
        &self,
        key: &StreamKey,
    ) -> Result<Vec<T>, StoreError> {
        self.read_all(key)?
            .iter()
            .map(StoredRecord::decode)
            .collect()
    }

    /// Ids of every stream of `kind` present on disk.
    pub fn stream_ids(&self, kind: &str) -> Result<Vec<String>, StoreError> {
        list_ids(&self.root.join("streams").join(file_stem(kind)), "log")
    }

    /// Last-writer-wins replace of a document. Returns the new version.
    pub fn snapshot_upsert<T: Serialize>(
        &self,
        kind: &str,
        id: &str,
        document: &T,
    ) -> Result<u64, StoreError> {
        let _guard = self.snapshot_lock.lock();
        let path = self.snapshot_path(kind, id);
        let version = match read_snapshot_raw(&path) {
            Ok(Some(prev)) => prev.version + 1,
            Ok(None) => 1,
            Err(e) => return Err(e),
        };
        let doc = Versioned {
            version,
            updated_at: self.clock.now(),
            document: serde_json::to_value(document)?,
        };
        write_atomic(&path, &serde_json::to_vec_pretty(&doc)?, self.durability)?;
        Ok(version)
    }

    pub fn snapshot_get<T: DeserializeOwned>(
        &self,
        kind: &str,
        id: &str,
    ) -> Result<Versioned<T>, StoreError> {
        let path = self.snapshot_path(kind, id);
        match read_snapshot_raw(&path)? {
            Some(v) => Ok(Versioned {
                version: v.version,
                updated_at: v.updated_at,
                document: serde_json::from_value(v.document)?,
            }),
            None => Err(StoreError::NotFound {
                kind: kind.to_string(),
                id: id.to_string(),
            }),
        }
    }

    pub fn snapshot_ids(&self, kind: &str) -> Result<Vec<String>, StoreError> {
        list_ids(&self.root.join("snapshots").join(file_stem(kind)), "json")
    }

    /// Stores an immutable object and returns its SHA-256 hex reference.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let hash = hex::encode(Sha256::digest(bytes));
        let path = self.root.join("blobs").join(&hash);
        if !path.exists() {
            write_atomic(&path, bytes, self.durability)?;
        }
        Ok(hash)
    }

    pub fn get_blob(&self, reference: &str) -> Result<Vec<u8>, StoreError> {
        let not_found = || StoreError::NotFound {
            kind: "blob".into(),
            id: reference.to_string(),
        };
        if reference.len() != 64 || !reference.chars().all(|c| c.is_ascii_hexdigit()) {
            return Err(not_found());
        }
        let path = self.root.join("blobs").join(reference.to_ascii_lowercase());
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(not_found()),
            Err(e) => return Err(e.into()),
        };
        if hex::encode(Sha256::digest(&bytes)) != reference.to_ascii_lowercase() {
            return Err(StoreError::Corrupt {
                stream: format!("blob/{reference}"),
                offset: 0,
                reason: "content hash mismatch".into(),
            });
        }
        Ok(bytes)
    }
}

fn read_snapshot_raw(path: &Path) -> Result<Option<Versioned<serde_json::Value>>, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| StoreError::Corrupt {
                stream: path.display().to_string(),
                offset: 0,
                reason: e.to_string(),
            }),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn list_ids(dir: &Path, ext: &str) -> Result<Vec<String>, StoreError> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        if let Some(id) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(id_from_stem)
        {
            ids.push(id);
        }
    }
    ids.sort();
    Ok(ids)
}

/// Write-temp-then-rename, so readers see either the old or the new file.
fn write_atomic(path: &Path, bytes: &[u8], durability: Durability) -> Result<(), StoreError> {
    let dir = path.parent().expect("store paths have a parent");
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("snapshot")
    ));
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        if durability == Durability::Fsync {
            f.sync_all()?;
        }
    }
    fs::rename(&tmp, path)?;
    if durability == Durability::Fsync {
        File::open(dir)?.sync_all()?;
    }
    Ok(())
}
