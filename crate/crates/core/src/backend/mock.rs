//! Deterministic scripted backend.
//!
//! Completions are answered by the first rule (in file order) whose pattern
//! matches; regex rules may reference capture groups (`$1`, `${name}`) in
//! their response. Embeddings come from explicit vectors, from label
//! anchors (tight clusters around a per-anchor direction), or from a hash of
//! the text expanded with ChaCha20 and scaled to unit norm.

use aho_corasick::AhoCorasick;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionRequest, Provider, ProviderOutput};
use crate::digest;

pub const DEFAULT_MOCK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    #[default]
    Substring,
    Regex,
}

/// Which part of the prompt a rule looks at.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleScope {
    #[default]
    Prompt,
    /// Text after the last blank line, i.e. the block the model must continue.
    LastBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub kind: MatchKind,
    #[serde(default)]
    pub scope: RuleScope,
    pub response: String,
}

impl MockRule {
    pub fn substring(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            kind: MatchKind::Substring,
            scope: RuleScope::Prompt,
            response: response.into(),
        }
    }

    pub fn regex(pattern: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            kind: MatchKind::Regex,
            ..Self::substring(pattern, response)
        }
    }

    pub fn in_last_block(mut self) -> Self {
        self.scope = RuleScope::LastBlock;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRule {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default)]
    pub kind: MatchKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<String>,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.05
}

impl EmbeddingRule {
    pub fn vector(pattern: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            pattern: pattern.into(),
            kind: MatchKind::Substring,
            vector: Some(vector),
            anchor: None,
            spread: default_spread(),
        }
    }

    pub fn anchor(pattern: impl Into<String>, anchor: impl Into<String>, spread: f64) -> Self {
        Self {
            pattern: pattern.into(),
            kind: MatchKind::Substring,
            vector: None,
            anchor: Some(anchor.into()),
            spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScript {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub rules: Vec<EmbeddingRule>,
}

fn default_dim() -> usize {
    DEFAULT_MOCK_DIM
}

impl Default for EmbeddingScript {
    fn default() -> Self {
        Self {
            dim: DEFAULT_MOCK_DIM,
            rules: Vec::new(),
        }
    }
}

/// Mock script file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: String,
    #[serde(default)]
    pub embedding: EmbeddingScript,
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, BackendError> {
        serde_json::from_str(text).map_err(|e| BackendError::MockScript(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::MockScript(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Substring rules of one scope compiled into a single automaton.
struct SubstringSet {
    automaton: Option<AhoCorasick>,
    rule_index: Vec<usize>,
}

impl SubstringSet {
    fn build(rules: &[(usize, &str)]) -> Result<Self, BackendError> {
        if rules.is_empty() {
            return Ok(Self {
                automaton: None,
                rule_index: Vec::new(),
            });
        }
        let automaton = AhoCorasick::new(rules.iter().map(|(_, p)| *p))
            .map_err(|e| BackendError::MockScript(e.to_string()))?;
        Ok(Self {
            automaton: Some(automaton),
            rule_index: rules.iter().map(|(i, _)| *i).collect(),
        })
    }

    /// Smallest rule index whose pattern occurs in `text`.
    fn first_match(&self, text: &str) -> Option<usize> {
        let ac = self.automaton.as_ref()?;
        ac.find_overlapping_iter(text)
            .map(|m| self.rule_index[m.pattern().as_usize()])
            .min()
    }
}

struct CompiledRules {
    prompt_substrings: SubstringSet,
    block_substrings: SubstringSet,
    regexes: Vec<(usize, RuleScope, Regex)>,
}

impl CompiledRules {
    fn compile<'a>(
        rules: impl Iterator<Item = (usize, &'a str, MatchKind, RuleScope)>,
    ) -> Result<Self, BackendError> {
        let mut prompt = Vec::new();
        let mut block = Vec::new();
        let mut regexes = Vec::new();
        for (i, pattern, kind, scope) in rules {
            if pattern.is_empty() {
                return Err(BackendError::MockScript(format!("rule {i} has an empty pattern")));
            }
            match (kind, scope) {
                (MatchKind::Substring, RuleScope::Prompt) => prompt.push((i, pattern)),
                (MatchKind::Substring, RuleScope::LastBlock) => block.push((i, pattern)),
                (MatchKind::Regex, scope) => {
                    let re = Regex::new(pattern)
                        .map_err(|e| BackendError::MockScript(format!("rule {i}: {e}")))?;
                    regexes.push((i, scope, re));
                }
            }
        }
        Ok(Self {
            prompt_substrings: SubstringSet::build(&prompt)?,
            block_substrings: SubstringSet::build(&block)?,
            regexes,
        })
    }

    /// Index of the first matching rule, plus regex captures when it is a regex rule.
    fn first<'t>(&self, text: &'t str) -> Option<(usize, Option<regex::Captures<'t>>)> {
        let block = last_block(text);
        let best = [
            self.prompt_substrings.first_match(text),
            self.block_substrings.first_match(block),
        ]
        .into_iter()
        .flatten()
        .min();
        for (i, scope, re) in &self.regexes {
            if best.is_some_and(|b| b < *i) {
                break;
            }
            let hay = match scope {
                RuleScope::Prompt => text,
                RuleScope::LastBlock => block,
            };
            if let Some(caps) = re.captures(hay) {
                return Some((*i, Some(caps)));
            }
        }
        best.map(|b| (b, None))
    }
}

fn last_block(text: &str) -> &str {
    match text.rfind("\n\n") {
        Some(pos) => &text[pos + 2..],
        None => text,
    }
}

pub struct MockProvider {
    script: MockScript,
    completion_rules: CompiledRules,
    embedding_rules: CompiledRules,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        if script.embedding.dim == 0 {
            return Err(BackendError::MockScript("embedding dim must be ≥ 1".into()));
        }
        for (i, rule) in script.embedding.rules.iter().enumerate() {
            if rule.vector.is_some() == rule.anchor.is_some() {
                return Err(BackendError::MockScript(format!(
                    "embedding rule {i} needs exactly one of `vector` or `anchor`"
                )));
            }
        }
        let completion_rules = CompiledRules::compile(
            script
                .rules
                .iter()
                .enumerate()
                .map(|(i, r)| (i, r.pattern.as_str(), r.kind, r.scope)),
        )?;
        let embedding_rules = CompiledRules::compile(
            script
                .embedding
                .rules
                .iter()
                .enumerate()
                .map(|(i, r)| (i, r.pattern.as_str(), r.kind, RuleScope::Prompt)),
        )?;
        Ok(Self {
            script,
            completion_rules,
            embedding_rules,
        })
    }

    pub fn respond(&self, prompt: &str) -> String {
        match self.completion_rules.first(prompt) {
            Some((i, Some(caps))) => {
                let mut out = String::new();
                caps.expand(&self.script.rules[i].response, &mut out);
                out
            }
            Some((i, None)) => self.script.rules[i].response.clone(),
            None => self.script.default.clone(),
        }
    }

    pub fn vector_for(&self, text: &str, model: &str) -> Vec<f64> {
        let dim = self.script.embedding.dim;
        match self.embedding_rules.first(text) {
            Some((i, _)) => {
                let rule = &self.script.embedding.rules[i];
                if let Some(v) = &rule.vector {
                    return v.clone();
                }
                let anchor = rule.anchor.as_deref().expect("validated");
                let base = hash_vector(&format!("anchor\u{1f}{anchor}"), dim);
                let noise = hash_vector(&format!("{model}\u{1f}{text}"), dim);
                let mixed: Vec<f64> = base
                    .iter()
                    .zip(&noise)
                    .map(|(b, n)| b + rule.spread * n)
                    .collect();
                unit(mixed)
            }
            None => hash_vector(&format!("{model}\u{1f}{text}"), dim),
        }
    }
}

/// Unit vector derived from a 128-bit digest of `input`, expanded with a
/// counter-mode generator.
pub fn hash_vector(input: &str, dim: usize) -> Vec<f64> {
    let d = digest::sha256(input.as_bytes());
    let mut seed = [0u8; 32];
    seed[..16].copy_from_slice(&d[..16]);
    let mut rng = ChaCha20Rng::from_seed(seed);
    let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    unit(raw)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / norm).collect()
}

impl Provider for MockProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<ProviderOutput<String>, BackendError> {
        Ok(ProviderOutput::plain(self.respond(&request.prompt)))
    }

    fn embed(&self, text: &str, model: &str) -> Result<ProviderOutput<Vec<f64>>, BackendError> {
        Ok(ProviderOutput::plain(self.vector_for(text, model)))
    }
}
