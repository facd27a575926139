//! FewRel-format corpus loading, detokenization and relation-aware text
//! reconstruction.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("failed to read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed record {index} of relation {label}: field `{field}` {reason}")]
    MalformedRecord {
        label: String,
        index: usize,
        field: String,
        reason: String,
    },
    #[error("span out of bounds in record {index} of relation {label}: {entity} span {start}..={end} but sentence has {len} tokens")]
    SpanOutOfBounds {
        label: String,
        index: usize,
        entity: &'static str,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("instance of relation {0} has no label metadata")]
    UnknownLabel(String),
    #[error("cannot detokenize an empty token sequence")]
    EmptyTokens,
    #[error("label metadata for {0}: {1}")]
    BadLabelMeta(String, String),
}

/// One relation class. `name` is what prompts show; `id` is the corpus key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
}

impl RelationLabel {
    pub fn new(id: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            description: None,
        }
    }
}

/// Inclusive token range, 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub surface: String,
    pub kb_id: Option<String>,
    pub spans: Vec<TokenSpan>,
}

impl EntityMention {
    pub fn first_span(&self) -> TokenSpan {
        self.spans[0]
    }
}

/// Content hash of an instance; stable across runs and machines.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceUid(pub String);

impl fmt::Display for InstanceUid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationInstance {
    pub tokens: Vec<String>,
    pub head: EntityMention,
    pub tail: EntityMention,
    pub label_id: String,
    pub instance_uid: InstanceUid,
}

impl RelationInstance {
    /// Builds an instance and computes its uid. Spans are checked against the
    /// token count; `surface` mismatches are only logged.
    pub fn new(
        tokens: Vec<String>,
        head: EntityMention,
        tail: EntityMention,
        label_id: impl Into<String>,
    ) -> Result<Self, CorpusError> {
        let label_id = label_id.into();
        if tokens.is_empty() {
            return Err(CorpusError::EmptyTokens);
        }
        for (entity, mention) in [("head", &head), ("tail", &tail)] {
            check_spans(&label_id, 0, entity, mention, tokens.len())?;
        }
        let instance_uid = compute_uid(&tokens, &head, &tail, &label_id);
        let instance = Self {
            tokens,
            head,
            tail,
            label_id,
            instance_uid,
        };
        instance.warn_on_surface_mismatch();
        Ok(instance)
    }

    /// Detokenized sentence.
    pub fn text(&self) -> String {
        detokenize(&self.tokens).expect("tokens are non-empty by construction")
    }

    /// Text of the head's first span; this wins over `head.surface` when they disagree.
    pub fn head_text(&self) -> String {
        self.span_text(self.head.first_span())
    }

    pub fn tail_text(&self) -> String {
        self.span_text(self.tail.first_span())
    }

    fn span_text(&self, span: TokenSpan) -> String {
        detokenize(&self.tokens[span.start..=span.end]).expect("span is non-empty")
    }

    fn warn_on_surface_mismatch(&self) {
        for (which, mention) in [("head", &self.head), ("tail", &self.tail)] {
            let derived = self.span_text(mention.first_span());
            if derived.to_lowercase() != mention.surface.to_lowercase() {
                log::warn!(
                    "instance {}: {which} surface {:?} differs from span text {:?}",
                    self.instance_uid,
                    mention.surface,
                    derived
                );
            }
        }
    }
}

fn check_spans(
    label: &str,
    index: usize,
    entity: &'static str,
    mention: &EntityMention,
    len: usize,
) -> Result<(), CorpusError> {
    if mention.spans.is_empty() {
        return Err(CorpusError::MalformedRecord {
            label: label.to_string(),
            index,
            field: entity_field(entity).to_string(),
            reason: "has no spans".into(),
        });
    }
    for span in &mention.spans {
        if span.start > span.end || span.end >= len {
            return Err(CorpusError::SpanOutOfBounds {
                label: label.to_string(),
                index,
                entity,
                start: span.start,
                end: span.end,
                len,
            });
        }
    }
    Ok(())
}

fn entity_field(entity: &str) -> &'static str {
    if entity == "head" {
        "h"
    } else {
        "t"
    }
}

fn compute_uid(
    tokens: &[String],
    head: &EntityMention,
    tail: &EntityMention,
    label_id: &str,
) -> InstanceUid {
    let spans = |m: &EntityMention| {
        m.spans
            .iter()
            .map(|s| format!("{}-{}", s.start, s.end))
            .collect::<Vec<_>>()
            .join(",")
    };
    let joined = tokens.join("\u{1f}");
    let head_spans = spans(head);
    let tail_spans = spans(tail);
    let full = digest::fields_hex([
        joined.as_bytes(),
        head.surface.as_bytes(),
        head_spans.as_bytes(),
        tail.surface.as_bytes(),
        tail_spans.as_bytes(),
        label_id.as_bytes(),
    ]);
    InstanceUid(full[..16].to_string())
}

/// Characters that attach to the preceding token.
const ATTACH_LEFT: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '’', ')', ']', '%'];
/// Characters that attach to the following token.
const ATTACH_RIGHT: &[char] = &['(', '[', '$'];

/// Joins tokens with single spaces, dropping the space before closing
/// punctuation and after opening brackets.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> Result<String, CorpusError> {
    let mut out = String::new();
    let mut prev_last: Option<char> = None;
    for (i, token) in tokens.iter().enumerate() {
        let token = token.as_ref();
        if i > 0 {
            let glue_left = token.chars().next().is_some_and(|c| ATTACH_LEFT.contains(&c));
            let glue_right = prev_last.is_some_and(|c| ATTACH_RIGHT.contains(&c));
            if !glue_left && !glue_right {
                out.push(' ');
            }
        }
        out.push_str(token);
        if let Some(c) = token.chars().last() {
            prev_last = Some(c);
        }
    }
    if tokens.is_empty() {
        return Err(CorpusError::EmptyTokens);
    }
    Ok(out)
}

/// Whitespace tokenizer that peels attachable punctuation and double quotes
/// into separate tokens. Used for texts that arrive untokenized (seed examples).
pub fn simple_tokenize(text: &str) -> Vec<String> {
    const LEADING: &[char] = &['(', '[', '$', '"'];
    const TRAILING: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '’', ')', ']', '%', '"'];
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        while let Some(c) = rest.chars().next() {
            if LEADING.contains(&c) && rest.len() > c.len_utf8() {
                out.push(c.to_string());
                rest = &rest[c.len_utf8()..];
            } else {
                break;
            }
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().last() {
            if TRAILING.contains(&c) && rest.len() > c.len_utf8() {
                trailing.push(c.to_string());
                rest = &rest[..rest.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.push(rest.to_string());
        out.extend(trailing.into_iter().rev());
    }
    out
}

/// Relation-aware reconstruction used as the embedding input for retrieval.
pub fn reconstruct_text(instance: &RelationInstance) -> String {
    format!(
        "Context: {} Given the context, what is the relation between \"{}\" and \"{}\"?",
        instance.text(),
        instance.head_text(),
        instance.tail_text()
    )
}

/// Immutable, deterministically ordered view of a corpus.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    labels: BTreeMap<String, RelationLabel>,
    instances: BTreeMap<String, Vec<RelationInstance>>,
    by_uid: HashMap<InstanceUid, (String, usize)>,
}

impl Catalog {
    /// Assembles a catalog. Instances are sorted by uid; duplicate uids within
    /// a label are dropped with a warning.
    pub fn from_parts(
        labels: impl IntoIterator<Item = RelationLabel>,
        instances: impl IntoIterator<Item = RelationInstance>,
    ) -> Result<Self, CorpusError> {
        let labels: BTreeMap<String, RelationLabel> =
            labels.into_iter().map(|l| (l.id.clone(), l)).collect();
        let mut grouped: BTreeMap<String, Vec<RelationInstance>> = BTreeMap::new();
        for instance in instances {
            if !labels.contains_key(&instance.label_id) {
                return Err(CorpusError::UnknownLabel(instance.label_id));
            }
            grouped
                .entry(instance.label_id.clone())
                .or_default()
                .push(instance);
        }
        for (label, list) in grouped.iter_mut() {
            list.sort_by(|a, b| a.instance_uid.cmp(&b.instance_uid));
            let before = list.len();
            list.dedup_by(|a, b| a.instance_uid == b.instance_uid);
            if list.len() != before {
                log::warn!(
                    "relation {label}: dropped {} duplicate instances",
                    before - list.len()
                );
            }
        }
        let mut by_uid = HashMap::new();
        for (label, list) in &grouped {
            for (i, instance) in list.iter().enumerate() {
                by_uid.insert(instance.instance_uid.clone(), (label.clone(), i));
            }
        }
        Ok(Self {
            labels,
            instances: grouped,
            by_uid,
        })
    }

    pub fn labels(&self) -> impl Iterator<Item = &RelationLabel> {
        self.labels.values()
    }

    pub fn label(&self, id: &str) -> Option<&RelationLabel> {
        self.labels.get(id)
    }

    pub fn label_ids(&self) -> Vec<String> {
        self.labels.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Instances of one relation, sorted by uid. Empty for unknown ids.
    pub fn instances(&self, label_id: &str) -> &[RelationInstance] {
        self.instances.get(label_id).map_or(&[], Vec::as_slice)
    }

    pub fn instance_count(&self) -> usize {
        self.instances.values().map(Vec::len).sum()
    }

    pub fn instance(&self, uid: &InstanceUid) -> Option<&RelationInstance> {
        let (label, idx) = self.by_uid.get(uid)?;
        self.instances.get(label).map(|v| &v[*idx])
    }

    /// All instances in label-id then uid order.
    pub fn iter(&self) -> impl Iterator<Item = &RelationInstance> {
        self.instances.values().flatten()
    }

    /// Serializes back to the FewRel data-file layout.
    pub fn to_fewrel_json(&self) -> Value {
        let mut map = serde_json::Map::new();
        for (label, list) in &self.instances {
            let records: Vec<Value> = list.iter().map(record_to_json).collect();
            map.insert(label.clone(), Value::Array(records));
        }
        Value::Object(map)
    }
}

fn record_to_json(instance: &RelationInstance) -> Value {
    let entity = |m: &EntityMention| {
        let spans: Vec<Vec<usize>> = m.spans.iter().map(|s| (s.start..=s.end).collect()).collect();
        serde_json::json!([m.surface, m.kb_id.clone().unwrap_or_default(), spans])
    };
    serde_json::json!({
        "tokens": instance.tokens,
        "h": entity(&instance.head),
        "t": entity(&instance.tail),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelMetaEntry {
    Record {
        name: String,
        #[serde(default)]
        description: Option<String>,
    },
    // pid2name.json style: [name, description]
    Pair(Vec<String>),
}

fn read_json(path: &Path) -> Result<Value, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            CorpusError::NotFound(path.to_path_buf())
        } else {
            CorpusError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    })?;
    serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a FewRel data file plus optional label metadata. Without metadata a
/// label's name defaults to its id.
pub fn load_catalog(path: &Path, label_meta_path: Option<&Path>) -> Result<Catalog, CorpusError> {
    let data = read_json(path)?;
    let meta = label_meta_path.map(read_json).transpose()?;
    catalog_from_values(&data, meta.as_ref())
}

pub fn catalog_from_values(data: &Value, meta: Option<&Value>) -> Result<Catalog, CorpusError> {
    let relations = data.as_object().ok_or_else(|| CorpusError::MalformedRecord {
        label: "<root>".into(),
        index: 0,
        field: "<root>".into(),
        reason: "must be an object keyed by relation id".into(),
    })?;
    let meta_map = match meta {
        Some(v) => parse_label_meta(v)?,
        None => BTreeMap::new(),
    };
    let mut labels = Vec::new();
    let mut instances = Vec::new();
    for (label_id, records) in relations {
        let label = meta_map.get(label_id).cloned().unwrap_or_else(|| {
            if !meta_map.is_empty() {
                log::warn!("no label metadata for {label_id}; using the id as its name");
            }
            RelationLabel::new(label_id.clone(), label_id.clone())
        });
        labels.push(label);
        let records = records.as_array().ok_or_else(|| CorpusError::MalformedRecord {
            label: label_id.clone(),
            index: 0,
            field: "<relation>".into(),
            reason: "must be a list of records".into(),
        })?;
        for (index, record) in records.iter().enumerate() {
            instances.push(parse_record(label_id, index, record)?);
        }
    }
    Catalog::from_parts(labels, instances)
}

fn parse_label_meta(v: &Value) -> Result<BTreeMap<String, RelationLabel>, CorpusError> {
    let obj = v
        .as_object()
        .ok_or_else(|| CorpusError::BadLabelMeta("<root>".into(), "must be an object".into()))?;
    let mut out = BTreeMap::new();
    for (id, entry) in obj {
        let entry: LabelMetaEntry = serde_json::from_value(entry.clone())
            .map_err(|e| CorpusError::BadLabelMeta(id.clone(), e.to_string()))?;
        let (name, description) = match entry {
            LabelMetaEntry::Record { name, description } => (name, description),
            LabelMetaEntry::Pair(parts) => {
                let mut it = parts.into_iter();
                let name = it
                    .next()
                    .ok_or_else(|| CorpusError::BadLabelMeta(id.clone(), "empty entry".into()))?;
                (name, it.next())
            }
        };
        if name.trim().is_empty() {
            return Err(CorpusError::BadLabelMeta(id.clone(), "empty name".into()));
        }
        out.insert(
            id.clone(),
            RelationLabel {
                id: id.clone(),
                name,
                description: description.filter(|d| !d.is_empty()),
            },
        );
    }
    Ok(out)
}

fn parse_record(label: &str, index: usize, record: &Value) -> Result<RelationInstance, CorpusError> {
    let malformed = |field: &str, reason: &str| CorpusError::MalformedRecord {
        label: label.to_string(),
        index,
        field: field.to_string(),
        reason: reason.to_string(),
    };
    let tokens: Vec<String> = record
        .get("tokens")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("tokens", "is missing or not a list"))?
        .iter()
        .map(|t| t.as_str().map(str::to_string))
        .collect::<Option<_>>()
        .ok_or_else(|| malformed("tokens", "contains a non-string"))?;
    if tokens.is_empty() {
        return Err(malformed("tokens", "is empty"));
    }
    let head = parse_entity(record, "h").map_err(|r| malformed("h", &r))?;
    let tail = parse_entity(record, "t").map_err(|r| malformed("t", &r))?;
    check_spans(label, index, "head", &head, tokens.len())?;
    check_spans(label, index, "tail", &tail, tokens.len())?;
    RelationInstance::new(tokens, head, tail, label)
}

fn parse_entity(record: &Value, field: &str) -> Result<EntityMention, String> {
    let triple = record
        .get(field)
        .and_then(Value::as_array)
        .ok_or("is missing or not a list")?;
    if triple.len() != 3 {
        return Err(format!("must have 3 elements, found {}", triple.len()));
    }
    let surface = triple[0].as_str().ok_or("surface is not a string")?.to_string();
    let kb_id = triple[1]
        .as_str()
        .ok_or("kb id is not a string")?
        .to_string();
    let span_lists = triple[2].as_array().ok_or("span list is not a list")?;
    let mut spans = Vec::new();
    for list in span_lists {
        let indices: Vec<usize> = list
            .as_array()
            .ok_or("span entry is not a list")?
            .iter()
            .map(|i| i.as_u64().map(|i| i as usize))
            .collect::<Option<_>>()
            .ok_or("span index is not a non-negative integer")?;
        let (first, last) = match (indices.first(), indices.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err("span entry is empty".into()),
        };
        if indices.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(format!("span {indices:?} is not a contiguous ascending run"));
        }
        spans.push(TokenSpan {
            start: first,
            end: last,
        });
    }
    if spans.is_empty() {
        return Err("has no spans".into());
    }
    Ok(EntityMention {
        surface,
        kb_id: (!kb_id.is_empty()).then_some(kb_id),
        spans,
    })
}
