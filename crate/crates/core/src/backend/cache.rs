//! Append-only completion cache keyed by request key.
//!
//! On disk each line is a canonical JSON record `{digest, key, text}` where
//! `digest` is the SHA-256 of `text`. Entries are checked on every hit.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::{request_key, Backend, BackendError, Completion, PromptRequest};
use crate::canonical::{self, sha256_hex};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    text: String,
    digest: String,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, CacheRecord>,
    file: Option<File>,
}

/// Thread-safe response cache. Writes are serialized and visible to
/// subsequent reads immediately.
pub struct ResponseCache {
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            inner: Mutex::new(Inner::default()),
        }
    }

    /// Opens (creating if needed) a cache file. Lines that are not valid
    /// records make the whole cache [`BackendError::CacheCorrupt`].
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let record: CacheRecord =
                    serde_json::from_str(&line).map_err(|_| BackendError::CacheCorrupt(format!("line {}", i + 1)))?;
                entries.insert(record.key.clone(), record);
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: Some(path.to_path_buf()),
            inner: Mutex::new(Inner {
                entries,
                file: Some(file),
            }),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Result<Option<String>, BackendError> {
        let inner = self.inner.lock().expect("cache lock");
        match inner.entries.get(key) {
            None => Ok(None),
            Some(r) if sha256_hex(r.text.as_bytes()) == r.digest => Ok(Some(r.text.clone())),
            Some(_) => Err(BackendError::CacheCorrupt(key.to_string())),
        }
    }

    pub fn insert(&self, key: &str, text: &str) -> Result<(), BackendError> {
        let record = CacheRecord {
            key: key.to_string(),
            text: text.to_string(),
            digest: sha256_hex(text.as_bytes()),
        };
        let mut inner = self.inner.lock().expect("cache lock");
        if let Some(file) = inner.file.as_mut() {
            let mut line = canonical::canonicalize(&record)?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
        }
        inner.entries.insert(record.key.clone(), record);
        Ok(())
    }

    /// Replay lookup: never calls a backend.
    pub fn lookup(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
        let key = request_key(req)?;
        match self.get(&key)? {
            Some(text) => Ok(Completion {
                text,
                backend_id: format!("cache:{}", req.params.model_id),
                cached: true,
            }),
            None => Err(BackendError::CacheMiss { key }),
        }
    }
}

/// Returns the cached text on a hit (no backend call); otherwise completes
/// through `backend` and stores the result.
pub fn cached_complete<B: Backend + ?Sized>(
    cache: &ResponseCache,
    backend: &B,
    req: &PromptRequest,
) -> Result<Completion, BackendError> {
    let key = request_key(req)?;
    if let Some(text) = cache.get(&key)? {
        return Ok(Completion {
            text,
            backend_id: backend.backend_id(req),
            cached: true,
        });
    }
    let completion = backend.complete(req)?;
    cache.insert(&key, &completion.text)?;
    Ok(completion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tests::request;
    use crate::backend::{ScriptRule, ScriptedBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Counting {
        inner: ScriptedBackend,
        calls: AtomicUsize,
    }

    impl Backend for Counting {
        fn kind(&self) -> &'static str {
            "counting"
        }
        fn complete(&self, req: &PromptRequest) -> Result<Completion, BackendError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.complete(req)
        }
    }

    fn counting() -> Counting {
        Counting {
            inner: ScriptedBackend::new(vec![], Some("Decision: Exclude".into())),
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn miss_then_hit() {
        let cache = ResponseCache::in_memory();
        let backend = counting();
        let first = cached_complete(&cache, &backend, &request("a")).unwrap();
        let second = cached_complete(&cache, &backend, &request("a")).unwrap();
        assert!(!first.cached && second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn distinct_requests_make_distinct_entries() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let cache = ResponseCache::open(&path).unwrap();
        let backend = counting();
        cached_complete(&cache, &backend, &request("a")).unwrap();
        cached_complete(&cache, &backend, &request("b")).unwrap();
        assert_eq!(cache.len(), 2);
        drop(cache);
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(reopened.len(), 2);
        assert!(reopened.lookup(&request("a")).unwrap().cached);
        assert!(matches!(
            reopened.lookup(&request("zzz")),
            Err(BackendError::CacheMiss { .. })
        ));
    }

    #[test]
    fn mutated_entry_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let backend = ScriptedBackend::new(vec![ScriptRule::contains("a", "Decision: Include")], None);
        {
            let cache = ResponseCache::open(&path).unwrap();
            cached_complete(&cache, &backend, &request("a")).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("Decision: Include", "Decision: Exclude")).unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert!(matches!(
            cached_complete(&cache, &backend, &request("a")),
            Err(BackendError::CacheCorrupt(_))
        ));

        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(ResponseCache::open(&path), Err(BackendError::CacheCorrupt(_))));
    }

    #[test]
    fn concurrent_writers_keep_every_entry() {
        let cache = ResponseCache::in_memory();
        let backend = counting();
        std::thread::scope(|s| {
            for t in 0..4 {
                let (cache, backend) = (&cache, &backend);
                s.spawn(move || {
                    for i in 0..25 {
                        cached_complete(cache, backend, &request(&format!("{t}-{i}"))).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 100);
    }
}
