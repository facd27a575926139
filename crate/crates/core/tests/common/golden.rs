//! Inputs of the frozen prompt fixtures and the renderer calls that must
//! reproduce them.

use std::collections::BTreeMap;

use fsre_core::corpus::{RelationInstance, RelationLabel};
use fsre_core::prompting::{
    render_auto_cot, render_cot_er, render_vanilla_icl, DemoOrder, PromptKind, PromptVariant,
};
use fsre_core::reasoning::{build_cot_generation_prompt, ReasonedInstance, SeedSet};

use super::{instance, SEEDS_FEWREL1};

fn estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn labels() -> Vec<RelationLabel> {
    [("P25", "mother"), ("P177", "crosses"), ("P40", "child"), ("P26", "spouse"), ("P641", "sport")]
        .into_iter()
        .map(|(id, name)| RelationLabel::new(id, name))
        .collect()
}

fn variant(kind: PromptKind) -> PromptVariant {
    PromptVariant::new(kind, DemoOrder::NearestLast, labels()).unwrap()
}

pub fn railway_bridge() -> RelationInstance {
    instance(
        "The Railway Bridge is a bridge that crosses the Daugava river in Riga, the capital of Latvia.",
        "Railway Bridge",
        "Daugava",
        "P177",
    )
}

fn seeds() -> SeedSet {
    SeedSet::from_json(SEEDS_FEWREL1).unwrap()
}

fn seed_instance(seeds: &SeedSet, id: &str) -> RelationInstance {
    let seed = seeds.get(id).unwrap();
    let inst = seed.to_instance().unwrap();
    assert_eq!(inst.text(), seed.context, "seed {id} does not survive tokenization");
    inst
}

fn with_reasoning(instance: RelationInstance, reasoning: &str) -> ReasonedInstance {
    ReasonedInstance {
        context: instance.text(),
        instance,
        reasoning: reasoning.into(),
        valid: true,
        stripped: false,
        generation_prompt_digest: None,
    }
}

/// (fixture file name, freshly rendered text) for every golden prompt.
pub fn rendered_cases() -> Vec<(&'static str, String)> {
    let seeds = seeds();
    let query = railway_bridge();
    let mut out = Vec::new();

    let nearest_first: Vec<RelationInstance> = ["P25", "P40", "P26", "P641", "P177"]
        .iter()
        .map(|id| seed_instance(&seeds, id))
        .collect();
    let refs: Vec<&RelationInstance> = nearest_first.iter().collect();
    let p = render_vanilla_icl(&refs, &query, &variant(PromptKind::VanillaIcl), &estimate).unwrap();
    out.push(("vanilla_icl.txt", p.text));

    let auto = [
        with_reasoning(
            seed_instance(&seeds, "P177"),
            "Wilton Bridge is described as a crossing of the River Wye.\nA bridge that is a crossing of a river crosses that river.",
        ),
        with_reasoning(
            seed_instance(&seeds, "P25"),
            "Anne de Bourbon was a daughter of John I and his wife Catherine of Vendôme.\nSo Catherine of Vendôme is the mother of Anne de Bourbon.",
        ),
    ];
    let refs: Vec<&ReasonedInstance> = auto.iter().collect();
    for (file, kind) in [("auto_cot.txt", PromptKind::AutoCot), ("auto_cot_reasoning.txt", PromptKind::AutoCotReasoning)] {
        let p = render_auto_cot(&refs, &query, &variant(kind), &estimate).unwrap();
        out.push((file, p.text));
    }

    let mother_target = instance(
        "Mary Ann Evans was the daughter of Christiana Pearson.",
        "Mary Ann Evans",
        "Christiana Pearson",
        "P25",
    );
    let all = labels();
    let prompt = build_cot_generation_prompt(seeds.get("P25").unwrap(), &mother_target, &all[0]).unwrap();
    out.push(("cot_generation_mother.txt", prompt));
    let prompt = build_cot_generation_prompt(seeds.get("P177").unwrap(), &query, &all[1]).unwrap();
    out.push(("cot_generation_crosses.txt", prompt));

    let mother = ReasonedInstance::from_seed(seeds.get("P25").unwrap()).unwrap();
    let crosses = ReasonedInstance::from_seed(seeds.get("P177").unwrap()).unwrap();
    let charles = ReasonedInstance {
        valid: false,
        ..with_reasoning(
            instance("The Charles Bridge crosses the Vltava in Prague.", "Charles Bridge", "Vltava", "P177"),
            "I am not sure.",
        )
    };
    let templates = BTreeMap::from([("P177".to_string(), seeds.get("P177").unwrap().predicate_template.clone())]);
    let refs = vec![&mother, &crosses, &charles];
    for (file, kind) in [("cot_er_mother.txt", PromptKind::CotEr), ("cot_er_ablated.txt", PromptKind::CotErAblated)] {
        let p = render_cot_er(&refs, &query, &variant(kind), &templates, &estimate).unwrap();
        out.push((file, p.text));
    }
    out
}
