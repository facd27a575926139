//! Prompt rendering for every method and constrained parsing of completions.
//!
//! Blocks are separated by one blank line and never contain blank lines
//! themselves. Prompts carry no trailing newline.

use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{InstanceUid, RelationInstance, RelationLabel};
use crate::digest;
use crate::reasoning::{strip_steps_text, ReasonedInstance};

pub const BLOCK_SEPARATOR: &str = "\n\n";
pub const FALLBACK_MAX_DISTANCE: f64 = 0.3;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("label set is empty")]
    EmptyLabels,
    #[error("label {0} appears more than once")]
    DuplicateLabel(String),
    #[error("template {template:?} must contain {{head}} and {{tail}} exactly once each")]
    MalformedTemplate { template: String },
    #[error("refusing to render a prompt with zero demonstrations")]
    NoDemonstrations,
    #[error("{kind:?} cannot be rendered by {renderer}")]
    WrongKind { kind: PromptKind, renderer: &'static str },
    #[error("label {0} is not in the prompt's label set")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    VanillaIcl,
    AutoCot,
    AutoCotReasoning,
    CotEr,
    CotErAblated,
}

/// Where the most similar demonstration goes relative to the query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemoOrder {
    NearestFirst,
    #[default]
    NearestLast,
}

impl DemoOrder {
    /// Reorders demonstrations given nearest-first.
    pub fn arrange<T>(self, mut ranked: Vec<T>) -> Vec<T> {
        if self == DemoOrder::NearestLast {
            ranked.reverse();
        }
        ranked
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub kind: PromptKind,
    pub demo_order: DemoOrder,
    pub labels: Vec<RelationLabel>,
}

impl PromptVariant {
    pub fn new(kind: PromptKind, demo_order: DemoOrder, labels: Vec<RelationLabel>) -> Result<Self, PromptError> {
        check_labels(&labels)?;
        Ok(Self {
            kind,
            demo_order,
            labels,
        })
    }

    pub fn label(&self, id: &str) -> Result<&RelationLabel, PromptError> {
        self.labels
            .iter()
            .find(|l| l.id == id)
            .ok_or_else(|| PromptError::UnknownLabel(id.to_string()))
    }
}

fn check_labels(labels: &[RelationLabel]) -> Result<(), PromptError> {
    if labels.is_empty() {
        return Err(PromptError::EmptyLabels);
    }
    let mut seen = std::collections::HashSet::new();
    for l in labels {
        if !seen.insert(&l.id) {
            return Err(PromptError::DuplicateLabel(l.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub est_tokens: usize,
    /// In rendered order.
    pub demo_uids: Vec<InstanceUid>,
    pub kind: PromptKind,
    pub demo_order: DemoOrder,
}

impl RenderedPrompt {
    pub fn digest(&self) -> String {
        digest::sha256_hex(self.text.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMethod {
    ConclusionPattern,
    Exact,
    Normalized,
    Fallback,
    Unparsed,
    /// Not parsed from text: nearest-centroid baseline output.
    Prototype,
}

impl PredictionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::ConclusionPattern => "conclusion_pattern",
            Self::Exact => "exact",
            Self::Normalized => "normalized",
            Self::Fallback => "fallback",
            Self::Unparsed => "unparsed",
            Self::Prototype => "prototype",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub label_id: Option<String>,
    pub raw: String,
    pub method: PredictionMethod,
}

/// Substitutes `{head}` / `{tail}` in a predicate template. Without a
/// template the generic `the relation between "A" and "B" is "label"` is used.
pub fn verbalize(head: &str, tail: &str, label: &RelationLabel, template: Option<&str>) -> Result<String, PromptError> {
    let Some(template) = template else {
        return Ok(format!(
            "the relation between \"{head}\" and \"{tail}\" is \"{}\"",
            label.name
        ));
    };
    let malformed = || PromptError::MalformedTemplate {
        template: template.to_string(),
    };
    if template.matches("{head}").count() != 1 || template.matches("{tail}").count() != 1 {
        return Err(malformed());
    }
    // Single pass over the template so entity text is never re-scanned.
    let h = template.find("{head}").ok_or_else(malformed)?;
    let t = template.find("{tail}").ok_or_else(malformed)?;
    let (first, first_val, second, second_val) = if h < t {
        (h, head, t, tail)
    } else {
        (t, tail, h, head)
    };
    let mut out = String::with_capacity(template.len() + head.len() + tail.len());
    out.push_str(&template[..first]);
    out.push_str(first_val);
    out.push_str(&template[first + 6..second]);
    out.push_str(second_val);
    out.push_str(&template[second + 6..]);
    Ok(out)
}

pub fn render_task_header(labels: &[RelationLabel]) -> Result<String, PromptError> {
    check_labels(labels)?;
    let n = labels.len();
    let names: Vec<&str> = labels.iter().map(|l| l.name.as_str()).collect();
    Ok(format!(
        "Please solve the Relation Extraction task.\n\
         Given the context, consider what's the most precise relation between two entities belonging to the following {n} possible relations.\n\
         The relation must be in these {n} possible relations: {}",
        names.join(", ")
    ))
}

/// `Given the context, what's the relation between "h" and "t"?`
pub fn question_line(instance: &RelationInstance) -> String {
    format!(
        "Given the context, what's the relation between \"{}\" and \"{}\"?",
        instance.head_text(),
        instance.tail_text()
    )
}

pub fn vanilla_demo_block(instance: &RelationInstance, label: &RelationLabel) -> String {
    format!("{} {}.", vanilla_query_block(instance), label.name)
}

pub fn vanilla_query_block(instance: &RelationInstance) -> String {
    format!(
        "Context: {}\nGiven the context, the relation between {} and {} is",
        instance.text(),
        instance.head_text(),
        instance.tail_text()
    )
}

/// Context + question, the common opening of every reasoning block.
fn context_question(context: &str, instance: &RelationInstance) -> String {
    format!("Context: {context}\n{}", question_line(instance))
}

/// Trims, drops blank lines and trailing whitespace so the text can sit
/// inside a block.
pub fn normalize_reasoning(text: &str) -> String {
    text.lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

fn auto_cot_answer(instance: &RelationInstance) -> String {
    format!(
        "So the relation between \"{}\" and \"{}\" is",
        instance.head_text(),
        instance.tail_text()
    )
}

pub fn auto_cot_demo_block(demo: &ReasonedInstance, label: &RelationLabel) -> String {
    let mut block = context_question(&demo.context, &demo.instance);
    let reasoning = normalize_reasoning(&demo.reasoning);
    if !reasoning.is_empty() {
        block.push('\n');
        block.push_str(&reasoning);
    }
    block.push('\n');
    block.push_str(&format!("{} \"{}\".", auto_cot_answer(&demo.instance), label.name));
    block
}

/// The direct-answer variant ends on the answer stem; the reasoning variant
/// stops at the question so the model reasons first.
pub fn auto_cot_query_block(query: &RelationInstance, with_reasoning: bool) -> String {
    let mut block = context_question(&query.text(), query);
    if !with_reasoning {
        block.push('\n');
        block.push_str(&auto_cot_answer(query));
    }
    block
}

/// Zero-shot reasoning trigger used to build Auto-CoT demonstrations.
pub fn auto_cot_generation_prompt(instance: &RelationInstance) -> String {
    format!("{}\nLet's think step by step.", context_question(&instance.text(), instance))
}

pub fn cot_er_demo_block(
    demo: &ReasonedInstance,
    label: &RelationLabel,
    ablated: bool,
    template: Option<&str>,
) -> Result<String, PromptError> {
    let mut block = context_question(&demo.context, &demo.instance);
    block.push('\n');
    if demo.valid {
        let reasoning = normalize_reasoning(&demo.reasoning);
        if ablated {
            block.push_str(&strip_steps_text(&reasoning).unwrap_or(reasoning));
        } else {
            block.push_str(&reasoning);
        }
    } else {
        let head = demo.instance.head_text();
        let tail = demo.instance.tail_text();
        let clause = verbalize(&head, &tail, label, template)?;
        block.push_str(&format!(
            "3. According to the context, {clause}.\nSo, the relation between \"{head}\" and \"{tail}\" is \"{}\".",
            label.name
        ));
    }
    Ok(block)
}

pub fn cot_er_query_block(query: &RelationInstance) -> String {
    context_question(&query.text(), query)
}

fn assemble(header: &str, blocks: &[String], query: &str) -> String {
    let mut parts = Vec::with_capacity(blocks.len() + 2);
    parts.push(header);
    parts.extend(blocks.iter().map(String::as_str));
    parts.push(query);
    parts.join(BLOCK_SEPARATOR)
}

/// Demonstrations come in nearest-first order; `variant.demo_order` decides
/// how they are laid out.
pub fn render_vanilla_icl(
    demos: &[&RelationInstance],
    query: &RelationInstance,
    variant: &PromptVariant,
    estimate: &dyn Fn(&str) -> usize,
) -> Result<RenderedPrompt, PromptError> {
    if variant.kind != PromptKind::VanillaIcl {
        return Err(PromptError::WrongKind {
            kind: variant.kind,
            renderer: "render_vanilla_icl",
        });
    }
    let header = render_task_header(&variant.labels)?;
    let ordered = variant.demo_order.arrange(demos.to_vec());
    let blocks = ordered
        .iter()
        .map(|d| Ok(vanilla_demo_block(d, variant.label(&d.label_id)?)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    let text = assemble(&header, &blocks, &vanilla_query_block(query));
    Ok(finish(text, ordered.iter().map(|d| d.instance_uid.clone()), variant, estimate))
}

pub fn render_auto_cot(
    demos: &[&ReasonedInstance],
    query: &RelationInstance,
    variant: &PromptVariant,
    estimate: &dyn Fn(&str) -> usize,
) -> Result<RenderedPrompt, PromptError> {
    let with_reasoning = match variant.kind {
        PromptKind::AutoCot => false,
        PromptKind::AutoCotReasoning => true,
        kind => {
            return Err(PromptError::WrongKind {
                kind,
                renderer: "render_auto_cot",
            })
        }
    };
    let header = render_task_header(&variant.labels)?;
    let ordered = variant.demo_order.arrange(demos.to_vec());
    let blocks = ordered
        .iter()
        .map(|d| Ok(auto_cot_demo_block(d, variant.label(&d.instance.label_id)?)))
        .collect::<Result<Vec<_>, PromptError>>()?;
    let text = assemble(&header, &blocks, &auto_cot_query_block(query, with_reasoning));
    Ok(finish(
        text,
        ordered.iter().map(|d| d.instance.instance_uid.clone()),
        variant,
        estimate,
    ))
}

pub fn render_cot_er(
    demos: &[&ReasonedInstance],
    query: &RelationInstance,
    variant: &PromptVariant,
    templates: &BTreeMap<String, String>,
    estimate: &dyn Fn(&str) -> usize,
) -> Result<RenderedPrompt, PromptError> {
    let ablated = match variant.kind {
        PromptKind::CotEr => false,
        PromptKind::CotErAblated => true,
        kind => {
            return Err(PromptError::WrongKind {
                kind,
                renderer: "render_cot_er",
            })
        }
    };
    if demos.is_empty() {
        return Err(PromptError::NoDemonstrations);
    }
    let header = render_task_header(&variant.labels)?;
    let ordered = variant.demo_order.arrange(demos.to_vec());
    let blocks = ordered
        .iter()
        .map(|d| {
            let id = &d.instance.label_id;
            cot_er_demo_block(d, variant.label(id)?, ablated, templates.get(id).map(String::as_str))
        })
        .collect::<Result<Vec<_>, PromptError>>()?;
    let text = assemble(&header, &blocks, &cot_er_query_block(query));
    Ok(finish(
        text,
        ordered.iter().map(|d| d.instance.instance_uid.clone()),
        variant,
        estimate,
    ))
}

fn finish(
    text: String,
    uids: impl Iterator<Item = InstanceUid>,
    variant: &PromptVariant,
    estimate: &dyn Fn(&str) -> usize,
) -> RenderedPrompt {
    RenderedPrompt {
        est_tokens: estimate(&text),
        text,
        demo_uids: uids.collect(),
        kind: variant.kind,
        demo_order: variant.demo_order,
    }
}

static CONCLUSION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"\bis\s+(?:"([^"\n]+)"|``(.+?)''|“([^”\n]+)”)"#).expect("static regex")
});

fn strip_answer(text: &str) -> &str {
    text.trim()
        .trim_end_matches('.')
        .trim()
        .trim_matches(|c| c == '"' || c == '\'' || c == '`' || c == '“' || c == '”')
        .trim()
}

fn contains_phrase(haystack: &str, needle: &str) -> bool {
    let is_word = |c: char| c.is_alphanumeric();
    haystack.match_indices(needle).any(|(i, m)| {
        let before = haystack[..i].chars().next_back();
        let after = haystack[i + m.len()..].chars().next();
        let edge_ok = |c: Option<char>, inner: Option<char>| match (c, inner) {
            (Some(c), Some(inner)) => !(is_word(c) && is_word(inner)),
            _ => true,
        };
        edge_ok(before, needle.chars().next()) && edge_ok(after, needle.chars().next_back())
    })
}

/// Maps a completion onto one of `labels` (matched by name). The result
/// never names a label outside the set.
pub fn parse_prediction(completion: &str, labels: &[RelationLabel]) -> Prediction {
    let found = |label: &RelationLabel, method| Prediction {
        label_id: Some(label.id.clone()),
        raw: completion.to_string(),
        method,
    };
    let by_name = |name: &str| {
        let name = name.trim().trim_end_matches('.').trim();
        labels.iter().find(|l| l.name.eq_ignore_ascii_case(name))
    };

    let last_in_set = CONCLUSION
        .captures_iter(completion)
        .filter_map(|c| {
            let m = c.get(1).or_else(|| c.get(2)).or_else(|| c.get(3))?;
            by_name(m.as_str())
        })
        .last();
    if let Some(label) = last_in_set {
        return found(label, PredictionMethod::ConclusionPattern);
    }

    let answer = strip_answer(completion);
    if let Some(label) = labels.iter().find(|l| l.name == answer) {
        return found(label, PredictionMethod::Exact);
    }

    let lower = completion.to_lowercase();
    let mut longest_first: Vec<&RelationLabel> = labels.iter().collect();
    longest_first.sort_by_key(|l| std::cmp::Reverse(l.name.chars().count()));
    if let Some(label) = longest_first
        .iter()
        .find(|l| !l.name.is_empty() && contains_phrase(&lower, &l.name.to_lowercase()))
    {
        return found(label, PredictionMethod::Normalized);
    }

    let answer = answer.to_lowercase();
    if !answer.is_empty() {
        let best = labels
            .iter()
            .map(|l| (1.0 - strsim::normalized_levenshtein(&answer, &l.name.to_lowercase()), l))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((d, label)) = best {
            if d <= FALLBACK_MAX_DISTANCE {
                return found(label, PredictionMethod::Fallback);
            }
        }
    }

    Prediction {
        label_id: None,
        raw: completion.to_string(),
        method: PredictionMethod::Unparsed,
    }
}

/// Cuts a completion where the model starts inventing a new example.
pub fn truncate_completion(text: &str) -> &str {
    match text.find("\nContext:") {
        Some(i) => &text[..i],
        None => text,
    }
}
