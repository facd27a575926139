//! Seed examples, reasoning-generation prompts and candidate sets.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, CompletionRequest};
use crate::corpus::{simple_tokenize, Catalog, CorpusError, EntityMention, InstanceUid, RelationInstance, RelationLabel, TokenSpan};
use crate::digest;
use crate::episodes::Episode;
use crate::prompting::{auto_cot_generation_prompt, normalize_reasoning, question_line, truncate_completion};

pub const REPAIR_SUFFIX: &str = "Answer strictly in three numbered steps followed by a conclusion sentence.";
const CONCLUSION_MARKER: &str = "So, the relation between";

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("cannot read seed file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("seed file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("duplicate seed for relation {0}")]
    Duplicate(String),
    #[error("no seed example for relation {0}")]
    Missing(String),
    #[error("seed for {label}: predicate template {template:?} must contain {{head}} and {{tail}} exactly once")]
    Template { label: String, template: String },
    #[error("seed for {label}: {reason}")]
    Invalid { label: String, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum ReasoningError {
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error("relation {0} is not in the catalog")]
    UnknownLabel(String),
    #[error("target instance is labelled {target} but the gold relation is {gold}")]
    LabelMismatch { target: String, gold: String },
    #[error("backend failed for instance {uid}: {source}")]
    Backend {
        uid: InstanceUid,
        #[source]
        source: BackendError,
    },
    #[error("instance {0} has no valid reasoning to strip")]
    NotValid(InstanceUid),
}

/// One hand-written three-step exemplar for a relation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedExample {
    pub label_id: String,
    pub label_name: String,
    pub context: String,
    pub head_surface: String,
    pub tail_surface: String,
    pub step1: String,
    pub step2: String,
    pub step3: String,
    pub conclusion: String,
    pub predicate_template: String,
}

#[derive(Deserialize)]
struct SeedRecord {
    label_id: String,
    label_name: String,
    context: String,
    head_surface: String,
    tail_surface: String,
    step1: String,
    step2: String,
    step3: String,
    conclusion: String,
    #[serde(default)]
    predicate_template: Option<String>,
}

impl SeedExample {
    fn from_record(r: SeedRecord) -> Result<Self, SeedError> {
        let invalid = |reason: String| SeedError::Invalid {
            label: r.label_id.clone(),
            reason,
        };
        let mentions = |text: &str, needle: &str| text.to_lowercase().contains(&needle.to_lowercase());
        if !mentions(&r.step1, &r.head_surface) {
            return Err(invalid(format!("step 1 does not mention {:?}", r.head_surface)));
        }
        if !mentions(&r.step2, &r.tail_surface) {
            return Err(invalid(format!("step 2 does not mention {:?}", r.tail_surface)));
        }
        if !mentions(&r.conclusion, &r.label_name) {
            return Err(invalid(format!("conclusion does not name {:?}", r.label_name)));
        }
        let template = match r.predicate_template {
            Some(t) => t,
            None => extract_template(&r.step3, &r.head_surface, &r.tail_surface).ok_or_else(|| SeedError::Template {
                label: r.label_id.clone(),
                template: r.step3.clone(),
            })?,
        };
        if template.matches("{head}").count() != 1 || template.matches("{tail}").count() != 1 {
            return Err(SeedError::Template {
                label: r.label_id,
                template,
            });
        }
        let seed = Self {
            label_id: r.label_id,
            label_name: r.label_name,
            context: r.context,
            head_surface: r.head_surface,
            tail_surface: r.tail_surface,
            step1: r.step1,
            step2: r.step2,
            step3: r.step3,
            conclusion: r.conclusion,
            predicate_template: template,
        };
        seed.to_instance()?;
        Ok(seed)
    }

    /// Steps and conclusion, one per line.
    pub fn reasoning_text(&self) -> String {
        [&self.step1, &self.step2, &self.step3, &self.conclusion]
            .map(|s| s.trim())
            .join("\n")
    }

    /// The seed sentence as a corpus instance, entities located by token search.
    pub fn to_instance(&self) -> Result<RelationInstance, SeedError> {
        let tokens = simple_tokenize(&self.context);
        let locate = |surface: &str| -> Result<EntityMention, SeedError> {
            let needle = simple_tokenize(surface);
            let span = find_tokens(&tokens, &needle, false)
                .or_else(|| find_tokens(&tokens, &needle, true))
                .ok_or_else(|| SeedError::Invalid {
                    label: self.label_id.clone(),
                    reason: format!("entity {surface:?} not found in the context"),
                })?;
            Ok(EntityMention {
                surface: surface.to_string(),
                kb_id: None,
                spans: vec![span],
            })
        };
        let head = locate(&self.head_surface)?;
        let tail = locate(&self.tail_surface)?;
        RelationInstance::new(tokens, head, tail, self.label_id.clone()).map_err(|e: CorpusError| SeedError::Invalid {
            label: self.label_id.clone(),
            reason: e.to_string(),
        })
    }
}

fn find_tokens(haystack: &[String], needle: &[String], fold_case: bool) -> Option<TokenSpan> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    let eq = |a: &String, b: &String| if fold_case { a.to_lowercase() == b.to_lowercase() } else { a == b };
    (0..=haystack.len() - needle.len())
        .find(|&i| haystack[i..i + needle.len()].iter().zip(needle).all(|(a, b)| eq(a, b)))
        .map(|i| TokenSpan {
            start: i,
            end: i + needle.len() - 1,
        })
}

/// Takes the clause after the last "indicate(s) that" in step 3 and turns
/// the quoted entity names into placeholders.
pub fn extract_template(step3: &str, head: &str, tail: &str) -> Option<String> {
    let pos = ["indicates that", "indicate that"]
        .iter()
        .filter_map(|m| step3.rfind(m).map(|p| p + m.len()))
        .max()?;
    let clause = step3[pos..].trim().trim_end_matches('.').trim_end();
    let template = clause
        .replacen(&format!("\"{head}\""), "\"{head}\"", 1)
        .replacen(&format!("\"{tail}\""), "\"{tail}\"", 1);
    (template.matches("{head}").count() == 1 && template.matches("{tail}").count() == 1).then_some(template)
}

/// Exactly one seed per relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSet {
    seeds: BTreeMap<String, SeedExample>,
}

impl SeedSet {
    pub fn from_json(text: &str) -> Result<Self, SeedError> {
        let records: Vec<SeedRecord> = serde_json::from_str(text)?;
        let mut seeds = BTreeMap::new();
        for record in records {
            let seed = SeedExample::from_record(record)?;
            if seeds.contains_key(&seed.label_id) {
                return Err(SeedError::Duplicate(seed.label_id));
            }
            seeds.insert(seed.label_id.clone(), seed);
        }
        Ok(Self { seeds })
    }

    pub fn load(path: &Path) -> Result<Self, SeedError> {
        let text = std::fs::read_to_string(path).map_err(|source| SeedError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn get(&self, label_id: &str) -> Result<&SeedExample, SeedError> {
        self.seeds
            .get(label_id)
            .ok_or_else(|| SeedError::Missing(label_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &SeedExample> {
        self.seeds.values()
    }

    /// Fails on the first required relation without a seed.
    pub fn require<'a>(&self, label_ids: impl IntoIterator<Item = &'a String>) -> Result<(), SeedError> {
        for id in label_ids {
            self.get(id)?;
        }
        Ok(())
    }

    /// label id → predicate template.
    pub fn templates(&self) -> BTreeMap<String, String> {
        self.seeds
            .iter()
            .map(|(id, s)| (id.clone(), s.predicate_template.clone()))
            .collect()
    }
}

/// A demonstration candidate: an instance plus reasoning text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonedInstance {
    pub instance: RelationInstance,
    /// Sentence as shown in prompts.
    pub context: String,
    pub reasoning: String,
    pub valid: bool,
    /// Steps 1 and 2 have been removed.
    #[serde(default)]
    pub stripped: bool,
    pub generation_prompt_digest: Option<String>,
}

impl ReasonedInstance {
    pub fn from_seed(seed: &SeedExample) -> Result<Self, SeedError> {
        let reasoning = seed.reasoning_text();
        Ok(Self {
            instance: seed.to_instance()?,
            context: seed.context.clone(),
            valid: is_valid_reasoning(&reasoning),
            reasoning,
            stripped: false,
            generation_prompt_digest: None,
        })
    }
}

/// The pieces of a three-step reasoning text. Concatenating the fields in
/// order gives back the original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReasoningParts<'a> {
    pub preamble: &'a str,
    pub step1: &'a str,
    pub step2: &'a str,
    pub step3: &'a str,
    pub conclusion: &'a str,
}

impl ReasoningParts<'_> {
    pub fn join(&self) -> String {
        [self.preamble, self.step1, self.step2, self.step3, self.conclusion].concat()
    }
}

static STEP_MARKERS: LazyLock<[Regex; 3]> = LazyLock::new(|| {
    ["1", "2", "3"].map(|n| Regex::new(&format!(r"(?m)^[ \t]*{n}\.")).expect("static regex"))
});

fn marker_after(re: &Regex, text: &str, from: usize) -> Option<usize> {
    re.find_at(text, from).map(|m| m.start())
}

pub fn split_reasoning(text: &str) -> Option<ReasoningParts<'_>> {
    let [m1, m2, m3] = &*STEP_MARKERS;
    let p1 = marker_after(m1, text, 0)?;
    let p2 = marker_after(m2, text, p1 + 1)?;
    let p3 = marker_after(m3, text, p2 + 1)?;
    let pc = p3 + 1 + text[p3 + 1..].find(CONCLUSION_MARKER)?;
    Some(ReasoningParts {
        preamble: &text[..p1],
        step1: &text[p1..p2],
        step2: &text[p2..p3],
        step3: &text[p3..pc],
        conclusion: &text[pc..],
    })
}

/// Line-anchored "1." / "2." / "3." in order, then a "So, the relation between" sentence.
pub fn is_valid_reasoning(text: &str) -> bool {
    split_reasoning(text).is_some()
}

fn is_stripped_form(text: &str) -> bool {
    let [m1, m2, m3] = &*STEP_MARKERS;
    m3.find(text).is_some_and(|m| text[..m.start()].trim().is_empty())
        && !m1.is_match(text)
        && !m2.is_match(text)
        && text.contains(CONCLUSION_MARKER)
}

/// Text from step 3 onward. Already-stripped text is returned unchanged.
pub fn strip_steps_text(text: &str) -> Option<String> {
    if let Some(parts) = split_reasoning(text) {
        return Some(format!("{}{}", parts.step3, parts.conclusion));
    }
    is_stripped_form(text).then(|| text.to_string())
}

/// Ablation: keeps step 3 and the conclusion.
pub fn strip_entity_steps(reasoned: &ReasonedInstance) -> Result<ReasonedInstance, ReasoningError> {
    if !reasoned.valid {
        return Err(ReasoningError::NotValid(reasoned.instance.instance_uid.clone()));
    }
    let text = strip_steps_text(&reasoned.reasoning)
        .ok_or_else(|| ReasoningError::NotValid(reasoned.instance.instance_uid.clone()))?;
    Ok(ReasonedInstance {
        reasoning: text,
        stripped: true,
        ..reasoned.clone()
    })
}

const GENERATION_HEADER: &str = "Please solve the Relation Extraction task.\n\
Given the context, figure out the reasoning steps that lead to the relation between two entities to be the specific one.";

fn announcement(gold: &RelationLabel) -> String {
    format!("Now, known the relation is {}, the reasoning steps are:", gold.name)
}

/// The seed for the gold relation as the single demonstration, then the
/// target, ending where the model must continue.
pub fn build_cot_generation_prompt(
    seed: &SeedExample,
    target: &RelationInstance,
    gold: &RelationLabel,
) -> Result<String, ReasoningError> {
    if target.label_id != gold.id {
        return Err(ReasoningError::LabelMismatch {
            target: target.label_id.clone(),
            gold: gold.id.clone(),
        });
    }
    let seed_block = format!(
        "Context: {}\nGiven the context, what's the relation between \"{}\" and \"{}\"?\n{}\n{}",
        seed.context,
        seed.head_surface,
        seed.tail_surface,
        announcement(gold),
        seed.reasoning_text()
    );
    let target_block = format!("Context: {}\n{}\n{}", target.text(), question_line(target), announcement(gold));
    Ok([GENERATION_HEADER, &seed_block, &target_block].join("\n\n"))
}

pub fn with_repair_suffix(prompt: &str) -> String {
    format!("{prompt}\n{REPAIR_SUFFIX}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSettings {
    pub model: String,
    pub max_output_tokens: u32,
}

fn sorted_support(episode: &Episode) -> Vec<&RelationInstance> {
    let mut support: Vec<&RelationInstance> = episode.support_instances().collect();
    support.sort_by(|a, b| (&a.label_id, &a.instance_uid).cmp(&(&b.label_id, &b.instance_uid)));
    support
}

fn run_prompts(
    backend: &Backend,
    settings: &GenerationSettings,
    targets: &[&RelationInstance],
    prompts: &[String],
) -> Result<Vec<String>, ReasoningError> {
    let requests: Vec<CompletionRequest> = prompts
        .iter()
        .map(|p| CompletionRequest::new(&settings.model, p.as_str()).with_max_output_tokens(settings.max_output_tokens))
        .collect();
    backend
        .complete_many(&requests)
        .into_iter()
        .zip(targets)
        .map(|(r, t)| {
            r.map(|text| normalize_reasoning(truncate_completion(&text)))
                .map_err(|source| ReasoningError::Backend {
                    uid: t.instance_uid.clone(),
                    source,
                })
        })
        .collect()
}

/// One reasoning text per support instance, in (label id, uid) order.
/// Malformed generations get one retry with [`REPAIR_SUFFIX`] and are kept
/// flagged invalid if still malformed.
pub fn generate_candidate_set(
    episode: &Episode,
    seeds: &SeedSet,
    catalog: &Catalog,
    backend: &Backend,
    settings: &GenerationSettings,
) -> Result<Vec<ReasonedInstance>, ReasoningError> {
    seeds.require(&episode.label_ids)?;
    let support = sorted_support(episode);
    let prompts = support
        .iter()
        .map(|inst| {
            let gold = catalog
                .label(&inst.label_id)
                .ok_or_else(|| ReasoningError::UnknownLabel(inst.label_id.clone()))?;
            build_cot_generation_prompt(seeds.get(&inst.label_id)?, inst, gold)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let texts = run_prompts(backend, settings, &support, &prompts)?;
    let mut out: Vec<ReasonedInstance> = support
        .iter()
        .zip(&prompts)
        .zip(texts)
        .map(|((inst, prompt), reasoning)| ReasonedInstance {
            instance: (*inst).clone(),
            context: inst.text(),
            valid: is_valid_reasoning(&reasoning),
            reasoning,
            stripped: false,
            generation_prompt_digest: Some(digest::sha256_hex(prompt.as_bytes())),
        })
        .collect();

    let retry: Vec<usize> = (0..out.len()).filter(|&i| !out[i].valid).collect();
    if !retry.is_empty() {
        let targets: Vec<&RelationInstance> = retry.iter().map(|&i| support[i]).collect();
        let repaired: Vec<String> = retry.iter().map(|&i| with_repair_suffix(&prompts[i])).collect();
        let texts = run_prompts(backend, settings, &targets, &repaired)?;
        for ((&i, prompt), reasoning) in retry.iter().zip(&repaired).zip(texts) {
            let valid = is_valid_reasoning(&reasoning);
            if !valid {
                log::warn!("reasoning for {} is still malformed after repair", support[i].instance_uid);
            }
            out[i].valid = valid;
            out[i].reasoning = reasoning;
            out[i].generation_prompt_digest = Some(digest::sha256_hex(prompt.as_bytes()));
        }
    }
    Ok(out)
}

/// The human-written seeds of the episode's relations; no backend calls.
pub fn manual_candidate_set(episode: &Episode, seeds: &SeedSet) -> Result<Vec<ReasonedInstance>, ReasoningError> {
    let mut ids = episode.label_ids.clone();
    ids.sort();
    ids.iter()
        .map(|id| Ok(ReasonedInstance::from_seed(seeds.get(id)?)?))
        .collect()
}

/// Zero-shot "Let's think step by step" reasoning for every support
/// instance. Empty output is flagged invalid.
pub fn generate_auto_cot_set(
    episode: &Episode,
    backend: &Backend,
    settings: &GenerationSettings,
) -> Result<Vec<ReasonedInstance>, ReasoningError> {
    let support = sorted_support(episode);
    let prompts: Vec<String> = support.iter().map(|i| auto_cot_generation_prompt(i)).collect();
    let texts = run_prompts(backend, settings, &support, &prompts)?;
    Ok(support
        .iter()
        .zip(&prompts)
        .zip(texts)
        .map(|((inst, prompt), reasoning)| ReasonedInstance {
            instance: (*inst).clone(),
            context: inst.text(),
            valid: !reasoning.is_empty(),
            reasoning,
            stripped: false,
            generation_prompt_digest: Some(digest::sha256_hex(prompt.as_bytes())),
        })
        .collect())
}
