//! Record/replay store of provider responses keyed by request digest.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::types::ChatResponse;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CassetteMode {
    /// Call the provider and store every response.
    Record,
    /// Serve stored responses only; a miss is an error, never a live call.
    Replay,
    /// Call the provider without storing anything.
    Passthrough,
}

impl FromStr for CassetteMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "record" => Ok(CassetteMode::Record),
            "replay" => Ok(CassetteMode::Replay),
            "passthrough" => Ok(CassetteMode::Passthrough),
            other => Err(format!("unknown cassette mode `{other}`")),
        }
    }
}

/// What the provider answered for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RecordedResponse {
    Chat(ChatResponse),
    Embedding { vectors: Vec<Vec<f32>> },
    /// A provider-side failure (HTTP status) replayed verbatim.
    Error { status: u16, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_summary: String,
    pub response: RecordedResponse,
    pub recorded_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum CassetteError {
    #[error("cassette {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cassette {path} is not a valid cassette document: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug)]
pub struct Cassette {
    path: Option<PathBuf>,
    mode: CassetteMode,
    entries: RwLock<BTreeMap<String, CassetteEntry>>,
    write_lock: Mutex<()>,
}

impl Cassette {
    pub fn in_memory(mode: CassetteMode) -> Self {
        Cassette {
            path: None,
            mode,
            entries: RwLock::new(BTreeMap::new()),
            write_lock: Mutex::new(()),
        }
    }

    /// Opens a cassette file. A missing file starts an empty cassette.
    pub fn open(path: impl AsRef<Path>, mode: CassetteMode) -> Result<Self, CassetteError> {
        let path = path.as_ref().to_path_buf();
        let entries = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|source| CassetteError::Format {
                path: path.clone(),
                source,
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(source) => return Err(CassetteError::Io { path, source }),
        };
        Ok(Cassette {
            path: Some(path),
            mode,
            entries: RwLock::new(entries),
            write_lock: Mutex::new(()),
        })
    }

    pub fn mode(&self) -> CassetteMode {
        self.mode
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lookup(&self, digest: &str) -> Option<CassetteEntry> {
        self.entries.read().unwrap().get(digest).cloned()
    }

    pub fn insert(&self, digest: String, request_summary: String, response: RecordedResponse) {
        let entry = CassetteEntry {
            request_summary,
            response,
            recorded_at: Utc::now(),
        };
        self.entries.write().unwrap().insert(digest, entry);
    }

    pub fn digests(&self) -> Vec<String> {
        self.entries.read().unwrap().keys().cloned().collect()
    }

    /// Writes the cassette atomically (temp file + rename). No-op for in-memory cassettes.
    pub fn save(&self) -> Result<(), CassetteError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let _guard = self.write_lock.lock().unwrap();
        let body = {
            let entries = self.entries.read().unwrap();
            serde_json::to_string_pretty(&*entries).expect("cassette entries serialize")
        };
        write_atomic(path, body.as_bytes()).map_err(|source| CassetteError::Io {
            path: path.clone(),
            source,
        })
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
