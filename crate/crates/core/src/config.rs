//! Run configuration. Files are TOML with kebab-case keys; every key can be
//! overridden from the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::TextMode;
use crate::digest;
use crate::prompting::{DemoOrder, PromptKind};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CotErAuto,
    CotErManual,
    CotErAblated,
    AutoCot,
    AutoCotReasoning,
    VanillaIcl,
    Proto,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::CotErAuto,
        Method::CotErManual,
        Method::CotErAblated,
        Method::AutoCot,
        Method::AutoCotReasoning,
        Method::VanillaIcl,
        Method::Proto,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::CotErAuto => "cot-er-auto",
            Method::CotErManual => "cot-er-manual",
            Method::CotErAblated => "cot-er-ablated",
            Method::AutoCot => "auto-cot",
            Method::AutoCotReasoning => "auto-cot-reasoning",
            Method::VanillaIcl => "vanilla-icl",
            Method::Proto => "proto",
        }
    }

    pub fn needs_seeds(self) -> bool {
        matches!(self, Method::CotErAuto | Method::CotErManual | Method::CotErAblated)
    }

    /// The prompt family used for the final prediction; `None` for the prototype baseline.
    pub fn prompt_kind(self) -> Option<PromptKind> {
        match self {
            Method::CotErAuto | Method::CotErManual => Some(PromptKind::CotEr),
            Method::CotErAblated => Some(PromptKind::CotErAblated),
            Method::AutoCot => Some(PromptKind::AutoCot),
            Method::AutoCotReasoning => Some(PromptKind::AutoCotReasoning),
            Method::VanillaIcl => Some(PromptKind::VanillaIcl),
            Method::Proto => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    #[default]
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub label_meta: Option<PathBuf>,
    pub seeds_file: Option<PathBuf>,
    pub method: Method,
    pub n: usize,
    pub k: usize,
    pub base_seeds: Vec<u64>,
    /// Total context window in estimated tokens.
    pub budget: usize,
    /// Part of `budget` kept free for the completion.
    pub output_reserve: usize,
    pub m_cap: Option<usize>,
    pub demo_order: DemoOrder,
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: String,
    pub embedding_model: String,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    pub queries_per_label: usize,
    pub fixed_support: bool,
    pub text_mode: TextMode,
    pub parallelism: usize,
    pub max_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            label_meta: None,
            seeds_file: None,
            method: Method::CotErAuto,
            n: 5,
            k: 1,
            base_seeds: vec![1],
            budget: 4096,
            output_reserve: 512,
            m_cap: None,
            demo_order: DemoOrder::NearestLast,
            backend: BackendKind::Live,
            mock_script: None,
            base_url: None,
            model: "text-davinci-003".into(),
            embedding_model: "text-embedding-ada-002".into(),
            cache_dir: PathBuf::from(".fsre-cache"),
            output_dir: PathBuf::from("fsre-out"),
            queries_per_label: crate::episodes::QUERIES_PER_LABEL,
            fixed_support: false,
            text_mode: TextMode::Reconstructed,
            parallelism: 4,
            max_retries: 5,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.n < 2 {
            return bad("n must be ≥ 2");
        }
        if self.k < 1 {
            return bad("k must be ≥ 1");
        }
        if self.base_seeds.is_empty() {
            return bad("at least one base seed is required");
        }
        let mut seen = std::collections::HashSet::new();
        if !self.base_seeds.iter().all(|s| seen.insert(s)) {
            return bad("base seeds must be distinct");
        }
        if self.dataset.is_none() {
            return bad("dataset path is required");
        }
        if self.method.needs_seeds() && self.seeds_file.is_none() {
            return bad("cot-er methods need a seeds file");
        }
        if self.backend == BackendKind::Mock && self.mock_script.is_none() {
            return bad("the mock backend needs a mock script");
        }
        if self.output_reserve == 0 || self.output_reserve >= self.budget {
            return bad("output reserve must be ≥ 1 and below the budget");
        }
        if self.output_reserve > u32::MAX as usize {
            return bad("output reserve is too large");
        }
        if self.m_cap == Some(0) {
            return bad("m-cap must be ≥ 1");
        }
        if self.queries_per_label == 0 {
            return bad("queries-per-label must be ≥ 1");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be ≥ 1");
        }
        if self.model.is_empty() || self.embedding_model.is_empty() {
            return bad("model ids must be non-empty");
        }
        Ok(())
    }

    /// Input token budget for prompts.
    pub fn prompt_budget(&self) -> usize {
        self.budget - self.output_reserve
    }

    /// Settings that shape results, with paths reduced to file names so the
    /// echo is independent of where the run happens.
    pub fn echo(&self) -> serde_json::Value {
        let name = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.file_name().map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned()))
        };
        serde_json::json!({
            "dataset": name(&self.dataset),
            "label_meta": name(&self.label_meta),
            "seeds_file": name(&self.seeds_file),
            "mock_script": name(&self.mock_script),
            "method": self.method,
            "n": self.n,
            "k": self.k,
            "base_seeds": self.base_seeds,
            "budget": self.budget,
            "output_reserve": self.output_reserve,
            "m_cap": self.m_cap,
            "demo_order": self.demo_order,
            "backend": self.backend,
            "model": self.model,
            "embedding_model": self.embedding_model,
            "queries_per_label": self.queries_per_label,
            "fixed_support": self.fixed_support,
            "text_mode": self.text_mode,
        })
    }

    /// Digest of [`RunConfig::echo`]; names checkpoint directories.
    pub fn digest(&self) -> String {
        digest::sha256_hex(self.echo().to_string().as_bytes())[..16].to_string()
    }
}
