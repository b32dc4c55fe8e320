//! On-disk generation cache.
//!
//! Entries are keyed by the SHA-256 of the prompt, the canonical decoding spec
//! and the model tag, and stored one JSON file per key under a two-level
//! sharded directory. Writes go through a temporary file and a rename so that
//! readers never see a partial entry. Sampled generations are cached only when
//! they carry a seed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{prompt_hash, Backend, BackendError, DecodingMode, DecodingSpec, GenerationResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_tag: String,
    pub prompt_hash: String,
    pub decoding: DecodingSpec,
    pub created_at: u64,
    pub result: GenerationResult,
}

#[derive(Debug, Default)]
pub struct GenerationCache {
    dir: Option<PathBuf>,
    write_lock: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

pub fn cache_key(prompt: &str, spec: &DecodingSpec, model_tag: &str) -> String {
    let spec = serde_json::to_string(&spec.canonical()).expect("serializable spec");
    let mut h = Sha256::new();
    for part in [prompt, &spec, model_tag] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Whether a generation under `spec` is reproducible and so worth caching.
pub fn is_cacheable(spec: &DecodingSpec) -> bool {
    spec.mode == DecodingMode::Greedy || spec.seed.is_some()
}

impl GenerationCache {
    pub fn disabled() -> Self {
        GenerationCache::default()
    }

    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(GenerationCache {
            dir: Some(dir),
            ..Default::default()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(&key[..2]).join(format!("{key}.json")))
    }

    pub fn get(&self, key: &str) -> Option<GenerationResult> {
        let path = self.path(key)?;
        let text = fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == key => {
                self.hits.fetch_add(1, Ordering::SeqCst);
                Some(entry.result)
            }
            _ => {
                log::warn!("ignoring unreadable cache entry {}", path.display());
                None
            }
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> io::Result<()> {
        let Some(path) = self.path(&entry.key) else {
            return Ok(());
        };
        let _guard = self.write_lock.lock().unwrap_or_else(|e| e.into_inner());
        if path.exists() {
            return Ok(());
        }
        let parent = path.parent().expect("sharded path");
        fs::create_dir_all(parent)?;
        let tmp = parent.join(format!(".{}.{}.tmp", entry.key, std::process::id()));
        fs::write(&tmp, serde_json::to_vec(entry).map_err(io::Error::other)?)?;
        fs::rename(&tmp, &path)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }
}

/// A backend handle whose generations go through a cache.
pub struct Generator<'a> {
    backend: &'a mut dyn Backend,
    cache: &'a GenerationCache,
}

impl<'a> Generator<'a> {
    pub fn new(backend: &'a mut dyn Backend, cache: &'a GenerationCache) -> Self {
        Generator { backend, cache }
    }

    pub fn backend(&mut self) -> &mut dyn Backend {
        self.backend
    }

    pub fn model_tag(&self) -> &str {
        self.backend.model_tag()
    }

    pub fn generate(&mut self, prompt: &str, spec: &DecodingSpec) -> Result<GenerationResult, BackendError> {
        if !is_cacheable(spec) || self.cache.dir.is_none() {
            return self.backend.generate(prompt, spec);
        }
        let key = cache_key(prompt, spec, self.backend.model_tag());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        self.cache.misses.fetch_add(1, Ordering::SeqCst);
        let result = self.backend.generate(prompt, spec)?;
        let entry = CacheEntry {
            key,
            model_tag: self.backend.model_tag().to_string(),
            prompt_hash: prompt_hash(prompt),
            decoding: spec.canonical(),
            created_at: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            result: result.clone(),
        };
        if let Err(e) = self.cache.put(&entry) {
            log::warn!("cache write failed: {e}");
        }
        Ok(result)
    }
}
