//! Completion and embedding services behind one client.
//!
//! A [`Backend`] wraps a [`Provider`] (live HTTP, scripted mock, or
//! cache-only replay) with a content-addressed response cache, per-model
//! token estimators, embedding-dimension checks and call statistics.

mod cache;
mod live;
mod mock;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{clear_cache, inspect_cache, CacheEntry, CacheSummary, ResponseCache};
pub use live::{LiveConfig, LiveProvider, RetryPolicy};
pub use mock::{hash_vector, EmbeddingRule, EmbeddingScript, MatchKind, MockProvider, MockRule, MockScript, RuleScope, DEFAULT_MOCK_DIM};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("network failure after {attempts} attempts: {message}")]
    Network { attempts: u32, message: String },
    #[error("authentication failed (HTTP {status}): {body}")]
    Authentication { status: u16, body: String },
    #[error("provider error (HTTP {status}): {body}")]
    Provider { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Decode(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("embedding dimension mismatch for model {model}: expected {expected}, got {got}")]
    DimensionMismatch {
        model: String,
        expected: usize,
        got: usize,
    },
    #[error("no cached response for {kind} request {key} and the backend is offline")]
    OfflineMiss { kind: &'static str, key: String },
    #[error("mock script: {0}")]
    MockScript(String),
    #[error("cache I/O at {}: {source}", path.display())]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing API key: set FSRE_API_KEY")]
    MissingCredential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<Vec<String>>,
}

impl CompletionRequest {
    /// Greedy (temperature 0) request with the default output bound.
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            stop: None,
        }
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be finite and ≥ 0, got {}",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_output_tokens must be ≥ 1".into()));
        }
        if self.model.is_empty() {
            return Err(BackendError::InvalidRequest("model id is empty".into()));
        }
        Ok(())
    }

    /// Cache key: SHA-256 of the canonical JSON request body.
    pub fn cache_key(&self) -> String {
        let body = serde_json::json!({
            "kind": "completion",
            "model": self.model,
            "prompt": self.prompt,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "stop": self.stop,
        });
        crate::digest::sha256_hex(body.to_string().as_bytes())
    }
}

pub fn embedding_cache_key(text: &str, model: &str) -> String {
    let body = serde_json::json!({"kind": "embedding", "model": model, "input": text});
    crate::digest::sha256_hex(body.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub model: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, model: impl Into<String>) -> Result<Self, BackendError> {
        if values.is_empty() {
            return Err(BackendError::Decode("embedding is empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Decode("embedding has non-finite components".into()));
        }
        Ok(Self {
            values,
            model: model.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Counters for one backend instance. Every field only ever grows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    pub live_calls: u64,
    pub live_completions: u64,
    pub live_embeddings: u64,
    pub cache_hits: u64,
    pub retries: u64,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Default)]
struct StatCounters {
    live_completions: AtomicU64,
    live_embeddings: AtomicU64,
    cache_hits: AtomicU64,
    retries: AtomicU64,
    tokens_in: AtomicU64,
    tokens_out: AtomicU64,
}

/// What a provider hands back for one call.
#[derive(Debug, Clone)]
pub struct ProviderOutput<T> {
    pub value: T,
    pub retries: u32,
    pub tokens_in: Option<u64>,
    pub tokens_out: Option<u64>,
}

impl<T> ProviderOutput<T> {
    pub fn plain(value: T) -> Self {
        Self {
            value,
            retries: 0,
            tokens_in: None,
            tokens_out: None,
        }
    }
}

/// A source of completions and embeddings. Implementations do their own
/// retrying and report how many retries they needed.
pub trait Provider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<ProviderOutput<String>, BackendError>;
    fn embed(&self, text: &str, model: &str) -> Result<ProviderOutput<Vec<f64>>, BackendError>;
}

/// Replays from the cache only; every miss is an error.
pub struct CacheOnlyProvider;

impl Provider for CacheOnlyProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<ProviderOutput<String>, BackendError> {
        Err(BackendError::OfflineMiss {
            kind: "completion",
            key: request.cache_key(),
        })
    }

    fn embed(&self, text: &str, model: &str) -> Result<ProviderOutput<Vec<f64>>, BackendError> {
        Err(BackendError::OfflineMiss {
            kind: "embedding",
            key: embedding_cache_key(text, model),
        })
    }
}

pub trait TokenEstimator: Send + Sync {
    fn estimate(&self, text: &str) -> usize;
}

/// `ceil(chars / chars_per_token)`.
#[derive(Debug, Clone, Copy)]
pub struct CharRatioEstimator {
    pub chars_per_token: usize,
}

impl Default for CharRatioEstimator {
    fn default() -> Self {
        Self { chars_per_token: 4 }
    }
}

impl TokenEstimator for CharRatioEstimator {
    fn estimate(&self, text: &str) -> usize {
        text.chars().count().div_ceil(self.chars_per_token)
    }
}

pub struct Backend {
    provider: Box<dyn Provider>,
    cache: ResponseCache,
    stats: StatCounters,
    default_estimator: Arc<dyn TokenEstimator>,
    estimators: HashMap<String, Arc<dyn TokenEstimator>>,
    dims: Mutex<HashMap<String, usize>>,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend")
            .field("cache", &self.cache)
            .field("stats", &self.stats())
            .finish_non_exhaustive()
    }
}

impl Backend {
    pub fn new(provider: impl Provider + 'static) -> Self {
        Self {
            provider: Box::new(provider),
            cache: ResponseCache::in_memory(),
            stats: StatCounters::default(),
            default_estimator: Arc::new(CharRatioEstimator::default()),
            estimators: HashMap::new(),
            dims: Mutex::new(HashMap::new()),
            pool: build_pool(4),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(MockProvider::new(script).expect("mock script compiles"))
    }

    pub fn with_cache_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache = ResponseCache::on_disk(dir.into());
        self
    }

    pub fn with_parallelism(mut self, threads: usize) -> Self {
        self.pool = build_pool(threads);
        self
    }

    pub fn with_estimator(mut self, model: impl Into<String>, estimator: impl TokenEstimator + 'static) -> Self {
        self.estimators.insert(model.into(), Arc::new(estimator));
        self
    }

    pub fn stats(&self) -> BackendStats {
        let c = &self.stats;
        let live_completions = c.live_completions.load(Ordering::Relaxed);
        let live_embeddings = c.live_embeddings.load(Ordering::Relaxed);
        BackendStats {
            live_calls: live_completions + live_embeddings,
            live_completions,
            live_embeddings,
            cache_hits: c.cache_hits.load(Ordering::Relaxed),
            retries: c.retries.load(Ordering::Relaxed),
            tokens_in: c.tokens_in.load(Ordering::Relaxed),
            tokens_out: c.tokens_out.load(Ordering::Relaxed),
        }
    }

    pub fn estimate_tokens(&self, text: &str, model: &str) -> usize {
        self.estimators
            .get(model)
            .unwrap_or(&self.default_estimator)
            .estimate(text)
    }

    /// Text of the first choice. Identical requests are served from the cache.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        request.validate()?;
        let key = request.cache_key();
        if let Some(text) = self.cache.get_completion(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(text);
        }
        let out = self.provider.complete(request)?;
        let c = &self.stats;
        c.live_completions.fetch_add(1, Ordering::Relaxed);
        c.retries.fetch_add(u64::from(out.retries), Ordering::Relaxed);
        let tin = out
            .tokens_in
            .unwrap_or_else(|| self.estimate_tokens(&request.prompt, &request.model) as u64);
        let tout = out
            .tokens_out
            .unwrap_or_else(|| self.estimate_tokens(&out.value, &request.model) as u64);
        c.tokens_in.fetch_add(tin, Ordering::Relaxed);
        c.tokens_out.fetch_add(tout, Ordering::Relaxed);
        self.cache.put_completion(&key, request, &out.value)?;
        Ok(out.value)
    }

    pub fn embed(&self, text: &str, model: &str) -> Result<EmbeddingVector, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("cannot embed empty text".into()));
        }
        let key = embedding_cache_key(text, model);
        let values = if let Some(values) = self.cache.get_embedding(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            values
        } else {
            let out = self.provider.embed(text, model)?;
            let c = &self.stats;
            c.live_embeddings.fetch_add(1, Ordering::Relaxed);
            c.retries.fetch_add(u64::from(out.retries), Ordering::Relaxed);
            let tin = out
                .tokens_in
                .unwrap_or_else(|| self.estimate_tokens(text, model) as u64);
            c.tokens_in.fetch_add(tin, Ordering::Relaxed);
            let vector = EmbeddingVector::new(out.value, model)?;
            self.check_dim(model, vector.dim())?;
            self.cache.put_embedding(&key, text, model, &vector.values)?;
            return Ok(vector);
        };
        let vector = EmbeddingVector::new(values, model)?;
        self.check_dim(model, vector.dim())?;
        Ok(vector)
    }

    fn check_dim(&self, model: &str, got: usize) -> Result<(), BackendError> {
        let mut dims = self.dims.lock().expect("dims lock");
        let expected = *dims.entry(model.to_string()).or_insert(got);
        if expected != got {
            return Err(BackendError::DimensionMismatch {
                model: model.to_string(),
                expected,
                got,
            });
        }
        Ok(())
    }

    /// Runs requests concurrently under the parallelism bound; results come
    /// back in input order.
    pub fn complete_many(&self, requests: &[CompletionRequest]) -> Vec<Result<String, BackendError>> {
        self.pool
            .install(|| requests.par_iter().map(|r| self.complete(r)).collect())
    }

    pub fn embed_many(&self, texts: &[String], model: &str) -> Vec<Result<EmbeddingVector, BackendError>> {
        self.pool
            .install(|| texts.par_iter().map(|t| self.embed(t, model)).collect())
    }
}

fn build_pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .thread_name(|i| format!("fsre-backend-{i}"))
        .build()
        .expect("thread pool")
}
