#![allow(dead_code)]

pub mod golden;
pub mod stub;

use std::path::{Path, PathBuf};

use fsre_core::backend::{EmbeddingRule, EmbeddingScript, MockRule, MockScript};
use fsre_core::config::{BackendKind, Method, RunConfig};
use fsre_core::corpus::{simple_tokenize, Catalog, EntityMention, RelationInstance, RelationLabel, TokenSpan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS_FEWREL1: &str = include_str!("../../data/seeds/fewrel1_val.json");
pub const SEEDS_FEWREL2: &str = include_str!("../../data/seeds/fewrel2_val.json");

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

fn locate(tokens: &[String], surface: &str) -> TokenSpan {
    let needle = simple_tokenize(surface);
    let start = (0..=tokens.len() - needle.len())
        .find(|&i| tokens[i..i + needle.len()] == needle[..])
        .unwrap_or_else(|| panic!("{surface:?} not in {tokens:?}"));
    TokenSpan {
        start,
        end: start + needle.len() - 1,
    }
}

/// Instance from plain text; entity surfaces must occur as whole tokens.
pub fn instance(text: &str, head: &str, tail: &str, label: &str) -> RelationInstance {
    let tokens = simple_tokenize(text);
    let mention = |s: &str| EntityMention {
        surface: s.to_string(),
        kb_id: None,
        spans: vec![locate(&tokens, s)],
    };
    let (h, t) = (mention(head), mention(tail));
    RelationInstance::new(tokens, h, t, label).unwrap()
}

pub fn label_id(i: usize) -> String {
    format!("L{i:02}")
}

pub fn label_name(i: usize) -> String {
    format!("synthetic relation {i:02}")
}

/// Token that identifies the relation of a synthetic sentence to the mock.
pub fn marker(i: usize) -> String {
    format!("mk{i:03}x")
}

/// `labels` relations with `per_label` instances each. Sentence shapes vary
/// with `seed` but every sentence carries its relation marker.
pub fn synthetic_catalog(labels: usize, per_label: usize, seed: u64) -> Catalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verbs = ["met", "joined", "left", "visited", "praised", "followed"];
    let places = ["Paris", "Lagos", "Quito", "Oslo", "Hanoi", "Perth"];
    let mut instances = Vec::new();
    for i in 0..labels {
        for j in 0..per_label {
            let head = format!("H{i}q{j}");
            let tail = format!("T{i}q{j}");
            let verb = verbs[rng.random_range(0..verbs.len())];
            let place = places[rng.random_range(0..places.len())];
            let year = 1900 + rng.random_range(0..120);
            let text = format!("{head} {verb} {tail} near {} in {place} in {year}.", marker(i));
            instances.push(instance(&text, &head, &tail, &label_id(i)));
        }
    }
    let rel_labels = (0..labels).map(|i| RelationLabel {
        id: label_id(i),
        name: label_name(i),
        description: None,
    });
    Catalog::from_parts(rel_labels, instances).unwrap()
}

fn embedding_rules(labels: usize) -> EmbeddingScript {
    EmbeddingScript {
        dim: 32,
        rules: (0..labels)
            .map(|i| EmbeddingRule::anchor(marker(i), label_id(i), 0.05))
            .collect(),
    }
}

const GENERATION_RULE: &str =
    r#"(?s)what's the relation between "([^"]+)" and "([^"]+)"\?\nNow, known the relation is (.+), the reasoning steps are:$"#;
const GENERATED_REASONING: &str = "1. Subject entity \"${1}\" is a name, which refers to an entity in the context.\n\
2. Object entity \"${2}\" is a name, which refers to an entity in the context.\n\
3. According to the context, the sentence indicates that \"${1}\" is linked to \"${2}\".\n\
So, the relation between \"${1}\" and \"${2}\" is \"${3}\".";

fn reasoning_rules() -> Vec<MockRule> {
    vec![
        MockRule::regex(GENERATION_RULE, GENERATED_REASONING).in_last_block(),
        MockRule::substring("Let's think step by step.", "The sentence names both entities together.").in_last_block(),
    ]
}

/// Answers every prompt with the gold relation of its final block.
pub fn echo_gold_script(labels: usize) -> MockScript {
    let mut rules = reasoning_rules();
    rules.extend((0..labels).map(|i| {
        MockRule::substring(
            marker(i),
            format!("So, the relation between the two entities is \"{}\".", label_name(i)),
        )
        .in_last_block()
    }));
    MockScript {
        rules,
        default: "no idea".into(),
        embedding: embedding_rules(labels),
    }
}

/// Always gives the same answer, whatever the prompt.
pub fn fixed_answer_script(labels: usize, answer: &str) -> MockScript {
    let mut rules = reasoning_rules();
    rules.push(MockRule::substring("mk", answer).in_last_block());
    MockScript {
        rules,
        default: answer.into(),
        embedding: embedding_rules(labels),
    }
}

/// One seed exemplar per synthetic relation, shaped like the shipped ones.
pub fn synthetic_seeds_json(labels: usize) -> String {
    let seeds: Vec<serde_json::Value> = (0..labels)
        .map(|i| {
            let (h, t, name) = (format!("Seedhead{i}"), format!("Seedtail{i}"), label_name(i));
            serde_json::json!({
                "label_id": label_id(i),
                "label_name": name,
                "context": format!("{h} stood beside {t} near {} long ago.", marker(i)),
                "head_surface": h,
                "tail_surface": t,
                "step1": format!("1. Subject entity \"{h}\" is a name, which refers to a person in the context."),
                "step2": format!("2. Object entity \"{t}\" is a name, which refers to a person in the context."),
                "step3": format!("3. According to the context, \"stood beside\" indicates that \"{h}\" stands by \"{t}\"."),
                "conclusion": format!("So, the relation between subject entity \"{h}\" and object entity \"{t}\" is \"{name}\"."),
            })
        })
        .collect();
    serde_json::to_string_pretty(&seeds).unwrap()
}

/// Writes dataset, label names, seeds and mock script into `dir` and
/// returns a mock-backed config pointing at them.
pub fn mock_run_config(dir: &Path, catalog: &Catalog, script: &MockScript, method: Method) -> RunConfig {
    let labels = catalog.len();
    let data = dir.join("synthetic.json");
    std::fs::write(&data, catalog.to_fewrel_json().to_string()).unwrap();
    let meta: serde_json::Map<String, serde_json::Value> = catalog
        .labels()
        .map(|l| (l.id.clone(), serde_json::json!([l.name, ""])))
        .collect();
    let meta_path = dir.join("labels.json");
    std::fs::write(&meta_path, serde_json::Value::Object(meta).to_string()).unwrap();
    let seeds = dir.join("seeds.json");
    std::fs::write(&seeds, synthetic_seeds_json(labels)).unwrap();
    let mock = dir.join("mock.json");
    std::fs::write(&mock, serde_json::to_string(script).unwrap()).unwrap();
    RunConfig {
        dataset: Some(data),
        label_meta: Some(meta_path),
        seeds_file: Some(seeds),
        method,
        backend: BackendKind::Mock,
        mock_script: Some(mock),
        cache_dir: dir.join("cache"),
        output_dir: dir.join("out"),
        ..RunConfig::default()
    }
}
