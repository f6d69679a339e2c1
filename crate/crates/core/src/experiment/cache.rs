//! Content-addressed on-disk cache for expensive pipeline stages.
//!
//! Keys hash every input that influences a stage's output, so a cache entry
//! is only reused when rerunning it would produce the same bytes.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Builds a cache key from length-prefixed parts.
#[derive(Debug, Clone, Default)]
pub struct KeyBuilder {
    hasher: Sha256,
}

impl KeyBuilder {
    pub fn new(stage: &str) -> Self {
        Self::default().part(stage.as_bytes())
    }

    pub fn part(mut self, bytes: &[u8]) -> Self {
        self.hasher.update((bytes.len() as u64).to_le_bytes());
        self.hasher.update(bytes);
        self
    }

    pub fn f64s(self, values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.part(&bytes)
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

/// Stage cache rooted at an optional directory; without one, every lookup misses.
#[derive(Debug, Default)]
pub struct StageCache {
    dir: Option<PathBuf>,
    hits: AtomicUsize,
    misses: AtomicUsize,
    writes: AtomicUsize,
}

impl StageCache {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn at(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn path(&self, stage: &str, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(stage).join(format!("{key}.bin")))
    }

    /// Returns the cached value for `key`, or computes and stores it.
    /// Unreadable entries are recomputed and overwritten.
    pub fn get_or_compute<T>(
        &self,
        stage: &str,
        key: &str,
        encode: impl FnOnce(&T) -> Vec<u8>,
        decode: impl FnOnce(&[u8]) -> Result<T>,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let Some(path) = self.path(stage, key) else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            return compute();
        };
        if let Ok(bytes) = std::fs::read(&path) {
            match decode(&bytes) {
                Ok(v) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(v);
                }
                Err(e) => log::warn!("discarding unreadable cache entry {}: {e}", path.display()),
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute()?;
        self.store(&path, &encode(&value))?;
        Ok(value)
    }

    /// Writes through a unique temporary file so concurrent writers never
    /// expose a partial entry.
    fn store(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        let parent = path.parent().expect("cache paths have a parent");
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let n = self.writes.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{}-{n}", std::process::id()));
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}
