//! Session files: a memory bank that outlives the process.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use retention_core::model::{MemoryBank, ModelConfig};
use retention_core::retention::{MemoryState, RetentionConfig};

use crate::codec::{self, FormatError, Reader, Writer};

pub const SESSION_MAGIC: &[u8; 8] = b"RETNSESS";
pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Format { path: PathBuf, source: FormatError },
}

impl StoreError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        StoreError::Format {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format_error(&self) -> Option<&FormatError> {
        match self {
            StoreError::Format { source, .. } => Some(source),
            StoreError::Io { .. } => None,
        }
    }
}

/// Hash of the hyperparameters a memory bank depends on.
pub fn model_fingerprint(model: &ModelConfig, ret: &RetentionConfig) -> u64 {
    let mut bytes = Vec::with_capacity(56);
    for v in [
        model.d_model,
        model.d_k,
        model.heads,
        model.layers,
        ret.capacity,
        model.vocab,
        model.max_len,
    ] {
        bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    codec::fnv1a(&bytes)
}

/// Seconds since the Unix epoch, or `SOURCE_DATE_EPOCH` when set so that
/// saved files are reproducible.
pub fn now_seconds() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse().ok()) {
        return v;
    }
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionStore {
    pub format_version: u32,
    pub model_fingerprint: u64,
    pub bank: MemoryBank,
    pub created: u64,
    pub updated: u64,
}

impl SessionStore {
    pub fn new(bank: MemoryBank, model_fingerprint: u64, now: u64) -> Self {
        SessionStore {
            format_version: SESSION_VERSION,
            model_fingerprint,
            bank,
            created: now,
            updated: now,
        }
    }

    /// `next_seq` of every layer.
    pub fn write_counters(&self) -> Vec<u64> {
        self.bank.layers().iter().map(MemoryState::next_seq).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(SESSION_MAGIC, self.format_version);
        w.u64(self.model_fingerprint);
        w.u64(self.created);
        w.u64(self.updated);
        w.u32(self.bank.layers().len() as u32);
        for layer in self.bank.layers() {
            w.section(|s| write_state(s, layer));
        }
        w.finish()
    }

    /// Parses and validates a session. The fingerprint is compared before
    /// the bank is decoded.
    pub fn from_bytes(bytes: &[u8], expected_fingerprint: u64) -> Result<Self, FormatError> {
        let mut r = codec::open(bytes, SESSION_MAGIC, "session", SESSION_VERSION)?;
        let model_fingerprint = r.u64()?;
        if model_fingerprint != expected_fingerprint {
            return Err(FormatError::Fingerprint {
                expected: expected_fingerprint,
                found: model_fingerprint,
            });
        }
        let created = r.u64()?;
        let updated = r.u64()?;
        let n = r.u32()?;
        let layers = (0..n)
            .map(|_| r.section(read_state))
            .collect::<Result<Vec<_>, _>>()?;
        r.expect_end()?;
        let bank = MemoryBank::from_layers(layers).map_err(|e| FormatError::Malformed(e.to_string()))?;
        Ok(SessionStore {
            format_version: SESSION_VERSION,
            model_fingerprint,
            bank,
            created,
            updated,
        })
    }
}

fn write_state(w: &mut Writer, m: &MemoryState) {
    w.u32(m.capacity() as u32);
    w.u32(m.d_model() as u32);
    w.u64(m.next_seq());
    for i in 0..m.capacity() {
        w.u8(m.occupied()[i] as u8);
        w.u64(m.insert_seq()[i]);
        w.f64(m.usage()[i]);
        for &v in m.slots().row(i) {
            w.f64(v);
        }
    }
}

fn read_state(r: &mut Reader<'_>) -> Result<MemoryState, FormatError> {
    let capacity = r.u32()? as usize;
    let d = r.u32()? as usize;
    let next_seq = r.u64()?;
    let mut occupied = Vec::with_capacity(capacity);
    let mut insert_seq = Vec::with_capacity(capacity);
    let mut usage = Vec::with_capacity(capacity);
    let mut data = Vec::with_capacity(capacity * d);
    for _ in 0..capacity {
        occupied.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(FormatError::Malformed(format!("occupancy byte {b}"))),
        });
        insert_seq.push(r.u64()?);
        usage.push(r.f64()?);
        for _ in 0..d {
            data.push(r.f64()?);
        }
    }
    let slots = retention_core::Matrix::new(capacity, d, data).map_err(|e| FormatError::Malformed(e.to_string()))?;
    MemoryState::from_parts(slots, occupied, insert_seq, usage, next_seq)
        .map_err(|e| FormatError::Malformed(e.to_string()))
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, so readers see either the old file or the new one.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| StoreError::io(path, io::Error::new(io::ErrorKind::InvalidInput, "not a file path")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(StoreError::io(path, e));
    }
    Ok(())
}

pub fn save_session(store: &SessionStore, path: &Path) -> Result<(), StoreError> {
    atomic_write(path, &store.to_bytes())
}

pub fn load_session(path: &Path, expected_fingerprint: u64) -> Result<SessionStore, StoreError> {
    let bytes = fs::read(path).map_err(|e| StoreError::io(path, e))?;
    SessionStore::from_bytes(&bytes, expected_fingerprint).map_err(|e| StoreError::format(path, e))
}

/// Advisory lock held for the lifetime of the value: `<path>.lock` is
/// created exclusively and removed on drop.
#[derive(Debug)]
pub struct SessionLock {
    path: PathBuf,
}

impl SessionLock {
    pub fn acquire(session: &Path) -> Result<Self, StoreError> {
        let mut name = session.as_os_str().to_owned();
        name.push(".lock");
        let path = PathBuf::from(name);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(SessionLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::io(
                &path,
                io::Error::new(io::ErrorKind::AlreadyExists, "session is locked by another process"),
            )),
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for SessionLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
