//! Measurement cache with optional append-only JSONL persistence.
//!
//! Keys are `(segment range, setting)`: within one graph and backend a
//! segment's duration does not depend on how the rest of the chain is
//! partitioned, so a measurement taken under one scheme is reused by every
//! scheme that contains the same segment.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::fusion::{OpGraph, Segment};
use crate::kernel::HardwareSpec;

use super::ParamSetting;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub segment: Segment,
    pub setting: ParamSetting,
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(flatten)]
    key: CacheKey,
    seconds: f64,
}

#[derive(Debug, Default)]
pub struct TuningCache {
    entries: HashMap<CacheKey, f64>,
    hits: usize,
    misses: usize,
    path: Option<PathBuf>,
    writer: Option<BufWriter<File>>,
}

impl TuningCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads `path` if it exists and appends every later insert to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: Record = serde_json::from_str(&line)?;
                entries.entry(r.key).or_insert(r.seconds);
            }
        } else if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self {
            entries,
            path: Some(path),
            writer: Some(BufWriter::new(file)),
            ..Self::default()
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Looks a key up, counting the hit or miss.
    pub fn lookup(&mut self, key: &CacheKey) -> Option<f64> {
        let v = self.entries.get(key).copied();
        if v.is_some() {
            self.hits += 1;
        } else {
            self.misses += 1;
        }
        v
    }

    pub fn peek(&self, key: &CacheKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    /// Inserts once; an existing value is kept and `false` returned.
    pub fn insert(&mut self, key: CacheKey, seconds: f64) -> Result<bool> {
        if self.entries.contains_key(&key) {
            return Ok(false);
        }
        self.entries.insert(key, seconds);
        if let Some(w) = self.writer.as_mut() {
            serde_json::to_writer(&mut *w, &Record { key, seconds })?;
            w.write_all(b"\n")?;
        }
        Ok(true)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = self.writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hits(&self) -> usize {
        self.hits
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn reset_counters(&mut self) {
        self.hits = 0;
        self.misses = 0;
    }
}

impl Drop for TuningCache {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Hex SHA-256 over the canonical JSON of `(graph, backend id, hw)`; names the
/// persisted cache file.
pub fn cache_file_key(graph: &OpGraph, backend_id: &str, hw: &HardwareSpec) -> String {
    let doc = serde_json::json!({ "graph": graph, "backend": backend_id, "hw": hw });
    let digest = Sha256::digest(doc.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
