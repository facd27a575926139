//! Content-addressed response cache: one JSON file per request digest,
//! written atomically (temp file then rename). An in-memory layer sits in
//! front so repeated lookups within a run do not touch the disk.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BackendError, CompletionRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub kind: String,
    pub model: String,
    pub request: Value,
    pub response: Value,
    pub timestamp: u64,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, Value>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn on_disk(dir: PathBuf) -> Self {
        Self {
            dir: Some(dir),
            memory: Mutex::new(HashMap::new()),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get_completion(&self, key: &str) -> Option<String> {
        self.get(key, "completion")?.as_str().map(str::to_string)
    }

    pub fn get_embedding(&self, key: &str) -> Option<Vec<f64>> {
        self.get(key, "embedding")?
            .as_array()?
            .iter()
            .map(Value::as_f64)
            .collect()
    }

    pub fn put_completion(&self, key: &str, request: &CompletionRequest, text: &str) -> Result<(), BackendError> {
        let req = serde_json::to_value(request).expect("request serializes");
        self.put(key, "completion", &request.model, req, Value::String(text.to_string()))
    }

    pub fn put_embedding(&self, key: &str, text: &str, model: &str, values: &[f64]) -> Result<(), BackendError> {
        let req = serde_json::json!({"model": model, "input": text});
        self.put(key, "embedding", model, req, serde_json::json!(values))
    }

    fn get(&self, key: &str, kind: &str) -> Option<Value> {
        if let Some(v) = self.memory.lock().expect("cache lock").get(key) {
            return Some(v.clone());
        }
        let path = entry_path(self.dir.as_ref()?, key);
        let text = std::fs::read_to_string(&path).ok()?;
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == key && entry.kind == kind => {
                self.memory
                    .lock()
                    .expect("cache lock")
                    .insert(key.to_string(), entry.response.clone());
                Some(entry.response)
            }
            Ok(_) => {
                log::warn!("cache entry {} does not match its key; refetching", path.display());
                None
            }
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; refetching", path.display());
                None
            }
        }
    }

    fn put(&self, key: &str, kind: &str, model: &str, request: Value, response: Value) -> Result<(), BackendError> {
        self.memory
            .lock()
            .expect("cache lock")
            .insert(key.to_string(), response.clone());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let entry = CacheEntry {
            key: key.to_string(),
            kind: kind.to_string(),
            model: model.to_string(),
            request,
            response,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let path = entry_path(dir, key);
        let io = |source| BackendError::CacheIo {
            path: path.clone(),
            source,
        };
        let parent = path.parent().expect("entry has a parent");
        std::fs::create_dir_all(parent).map_err(io)?;
        let tmp = parent.join(format!(".{key}.{}.tmp", std::process::id()));
        let body = serde_json::to_vec_pretty(&entry).expect("entry serializes");
        std::fs::write(&tmp, body).map_err(io)?;
        std::fs::rename(&tmp, &path).map_err(io)?;
        Ok(())
    }
}

fn entry_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(&key[..2]).join(format!("{key}.json"))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSummary {
    pub entries: usize,
    pub completions: usize,
    pub embeddings: usize,
    pub by_model: BTreeMap<String, usize>,
    pub bytes: u64,
    pub corrupt: usize,
}

/// Read-only scan of a cache directory. A missing directory is an empty cache.
pub fn inspect_cache(dir: &Path) -> Result<CacheSummary, BackendError> {
    let mut summary = CacheSummary::default();
    if !dir.exists() {
        return Ok(summary);
    }
    let io = |source| BackendError::CacheIo {
        path: dir.to_path_buf(),
        source,
    };
    for shard in std::fs::read_dir(dir).map_err(io)? {
        let shard = shard.map_err(io)?;
        if !shard.file_type().map_err(io)?.is_dir() {
            continue;
        }
        for file in std::fs::read_dir(shard.path()).map_err(io)? {
            let file = file.map_err(io)?;
            let path = file.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let meta = file.metadata().map_err(io)?;
            summary.bytes += meta.len();
            let parsed = std::fs::read_to_string(&path)
                .ok()
                .and_then(|t| serde_json::from_str::<CacheEntry>(&t).ok());
            match parsed {
                Some(entry) => {
                    summary.entries += 1;
                    match entry.kind.as_str() {
                        "completion" => summary.completions += 1,
                        "embedding" => summary.embeddings += 1,
                        _ => {}
                    }
                    *summary.by_model.entry(entry.model).or_default() += 1;
                }
                None => summary.corrupt += 1,
            }
        }
    }
    Ok(summary)
}

/// Removes every entry; returns how many files were deleted.
pub fn clear_cache(dir: &Path) -> Result<usize, BackendError> {
    let before = inspect_cache(dir)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|source| BackendError::CacheIo {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(before.entries + before.corrupt)
}
