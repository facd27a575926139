//! Acceptance suite. Criteria 1 to 8 run offline and print one PASS/FAIL
//! line each; criterion 9 talks to a real endpoint and only runs when
//! `FSRE_LIVE_SMOKE=1`.

mod common;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::time::{Duration, Instant};

use fsre_core::backend::{Backend, CompletionRequest, EmbeddingScript, LiveConfig, LiveProvider, MockScript, RetryPolicy};
use fsre_core::baselines::{build_prototypes, embedding_text, prototype_classify, TextMode};
use fsre_core::config::{Method, RunConfig};
use fsre_core::corpus::{reconstruct_text, Catalog, InstanceUid, RelationInstance, RelationLabel};
use fsre_core::episodes::{episode_seed, plan_evaluation, sample_episode, Episode};
use fsre_core::evaluation::{EvalRecord, RunReport};
use fsre_core::pipeline::Pipeline;
use fsre_core::prompting::{
    cot_er_demo_block, cot_er_query_block, parse_prediction, render_cot_er, render_task_header, DemoOrder,
    PredictionMethod, PromptKind, PromptVariant,
};
use fsre_core::reasoning::{ReasonedInstance, SeedSet};
use fsre_core::retrieval::{pack_demonstrations, rank_candidates, ScoredCandidate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::stub::{completion, serve, Reply};
use common::{echo_gold_script, fixed_answer_script, label_name, mock_run_config, synthetic_catalog};

/// Writes straight to the process stdout so the verdicts show even when the
/// test harness captures output.
macro_rules! announce {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
    }};
}

type Outcome = Result<(), String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Outcome {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn estimate(text: &str) -> usize {
    text.chars().count().div_ceil(4)
}

fn hash_backend(dim: usize) -> Backend {
    Backend::mock(MockScript {
        rules: Vec::new(),
        default: String::new(),
        embedding: EmbeddingScript { dim, rules: Vec::new() },
    })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    s.sqrt()
}

// 1
fn golden_prompts() -> Outcome {
    for (file, text) in common::golden::rendered_cases() {
        let path = common::fixture("prompts").join(file);
        let expected = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(text == expected, || format!("{file} differs from its fixture"))?;
    }
    Ok(())
}

fn random_instance(rng: &mut ChaCha8Rng, labels: usize) -> RelationInstance {
    const WORDS: [&str; 12] = ["river", "bridge", "club", "film", "city", "singer", "team", "war", "star", "lake", "king", "band"];
    let head = format!("H{}", rng.random_range(0..1_000_000));
    let tail = format!("T{}", rng.random_range(0..1_000_000));
    let mut words: Vec<String> = (0..rng.random_range(3..12))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect();
    words.insert(rng.random_range(0..=words.len()), head.clone());
    words.insert(rng.random_range(0..=words.len()), tail.clone());
    let text = format!("{}.", words.join(" "));
    common::instance(&text, &head, &tail, &format!("L{:02}", rng.random_range(0..labels)))
}

// 2
fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let backend = hash_backend(24);
    let oracle_backend = hash_backend(24);
    for case in 0..200 {
        let query = random_instance(&mut rng, 5);
        let mut candidates: Vec<RelationInstance> = (0..25).map(|_| random_instance(&mut rng, 5)).collect();
        // Same sentence under another label: equal distance, different uid.
        let twin = candidates[0].clone();
        let other = if twin.label_id == "L00" { "L01" } else { "L00" };
        candidates[1] = RelationInstance::new(twin.tokens.clone(), twin.head.clone(), twin.tail.clone(), other).unwrap();
        let cost: BTreeMap<InstanceUid, usize> = candidates
            .iter()
            .map(|c| (c.instance_uid.clone(), rng.random_range(20..120)))
            .collect();

        let ranked = rank_candidates(candidates.clone(), &query, &backend, "emb", |c: &RelationInstance| cost[&c.instance_uid])
            .map_err(|e| e.to_string())?;

        let q = oracle_backend.embed(&reconstruct_text(&query), "emb").unwrap().values;
        let mut brute: Vec<(f64, InstanceUid)> = candidates
            .iter()
            .map(|c| {
                let v = oracle_backend.embed(&reconstruct_text(c), "emb").unwrap().values;
                (euclid(&v, &q), c.instance_uid.clone())
            })
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let got: Vec<&InstanceUid> = ranked.iter().map(|s| &s.candidate.instance_uid).collect();
        let want: Vec<&InstanceUid> = brute.iter().map(|b| &b.1).collect();
        ensure(got == want, || format!("case {case}: ranking differs from brute force"))?;

        let overhead = rng.random_range(50..400);
        let budget = rng.random_range(overhead..overhead + 2500);
        let tokens: Vec<usize> = ranked.iter().map(|s| s.est_tokens).collect();
        match pack_demonstrations(ranked, overhead, budget, None) {
            Ok(sel) => {
                let m = sel.len();
                let used = overhead + tokens[..m].iter().sum::<usize>();
                ensure(used <= budget, || format!("case {case}: selection overflows"))?;
                ensure(m == tokens.len() || used + tokens[m] > budget, || {
                    format!("case {case}: candidate {m} would still fit")
                })?;
            }
            Err(_) => ensure(overhead + tokens[0] > budget, || format!("case {case}: refused a fitting candidate"))?,
        }
    }
    Ok(())
}

// 3
fn packing_counts() -> Outcome {
    let seeds = SeedSet::from_json(common::SEEDS_FEWREL1).map_err(|e| e.to_string())?;
    let labels: Vec<RelationLabel> = seeds.iter().map(|s| RelationLabel::new(&s.label_id, &s.label_name)).collect();
    let variant = PromptVariant::new(PromptKind::CotEr, DemoOrder::NearestLast, labels).map_err(|e| e.to_string())?;
    let templates = seeds.templates();
    let demos: Vec<ReasonedInstance> = seeds.iter().map(|s| ReasonedInstance::from_seed(s).unwrap()).collect();
    let query = common::golden::railway_bridge();
    let block = |d: &ReasonedInstance| {
        let label = variant.label(&d.instance.label_id).unwrap();
        let text = cot_er_demo_block(d, label, false, templates.get(&label.id).map(String::as_str)).unwrap();
        estimate(&format!("{text}\n\n"))
    };
    let overhead = estimate(&format!("{}\n\n", render_task_header(&variant.labels).unwrap())) + estimate(&cot_er_query_block(&query));
    let backend = hash_backend(32);
    let ranked: Vec<ScoredCandidate<&ReasonedInstance>> =
        rank_candidates(demos.iter().collect(), &query, &backend, "emb", |d: &&ReasonedInstance| block(d)).map_err(|e| e.to_string())?;
    for m in [5usize, 10, 13] {
        let budget = overhead + ranked[..m].iter().map(|s| s.est_tokens).sum::<usize>();
        let picked = pack_demonstrations(ranked.clone(), overhead, budget, None).map_err(|e| e.to_string())?;
        ensure(picked.len() == m, || format!("budget {budget} selected {} not {m}", picked.len()))?;
        let short = pack_demonstrations(ranked.clone(), overhead, budget - 1, None).map_err(|e| e.to_string())?;
        ensure(short.len() == m - 1, || format!("budget {} selected {}", budget - 1, short.len()))?;
        let roomy = pack_demonstrations(ranked.clone(), overhead, budget * 4, Some(m)).map_err(|e| e.to_string())?;
        ensure(roomy.len() == m, || format!("cap {m} selected {}", roomy.len()))?;

        let chosen: Vec<&ReasonedInstance> = picked.iter().map(|s| s.candidate).collect();
        let prompt = render_cot_er(&chosen, &query, &variant, &templates, &estimate).map_err(|e| e.to_string())?;
        ensure(prompt.est_tokens <= budget, || format!("rendered {} tokens over {budget}", prompt.est_tokens))?;
        ensure(prompt.text.matches('?').count() == m + 1, || format!("M={m}: wrong number of questions"))?;
    }
    Ok(())
}

// 4
fn prototype_oracle() -> Outcome {
    let catalog = synthetic_catalog(12, 16, 4);
    let backend = hash_backend(16);
    let oracle = hash_backend(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..100u64 {
        let n = rng.random_range(2..=10);
        let k = rng.random_range(1..=5);
        let ep = sample_episode(&catalog, n, k, 2 * n, episode_seed(40, case)).map_err(|e| e.to_string())?;
        let mode = if case % 2 == 0 { TextMode::Reconstructed } else { TextMode::Raw };
        let protos = build_prototypes(&ep, &backend, "emb", mode).map_err(|e| e.to_string())?;

        let mut centroids: Vec<(String, Vec<f64>)> = Vec::new();
        let mut points: Vec<(String, Vec<f64>)> = Vec::new();
        for (label, support) in &ep.support {
            let vs: Vec<Vec<f64>> = support
                .iter()
                .map(|i| oracle.embed(&embedding_text(i, mode), "emb").unwrap().values)
                .collect();
            let mut c = vec![0.0; vs[0].len()];
            for v in &vs {
                for (ci, x) in c.iter_mut().zip(v) {
                    *ci += x / vs.len() as f64;
                }
            }
            centroids.push((label.clone(), c));
            points.extend(vs.into_iter().map(|v| (label.clone(), v)));
        }
        for q in &ep.queries {
            let qv = oracle.embed(&embedding_text(q, mode), "emb").unwrap().values;
            let argmin = |set: &[(String, Vec<f64>)]| {
                set.iter()
                    .map(|(l, v)| (euclid(v, &qv), l.clone()))
                    .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))
                    .unwrap()
                    .1
            };
            let got = prototype_classify(&protos, q, &backend, "emb", mode).map_err(|e| e.to_string())?;
            let want = argmin(&centroids);
            ensure(got == want, || format!("case {case}: {got} vs centroid oracle {want}"))?;
            if k == 1 {
                ensure(got == argmin(&points), || format!("case {case}: K=1 differs from 1-NN"))?;
            }
        }
    }
    Ok(())
}

const CHILD_ENV: &str = "FSRE_ACCEPTANCE_PLAN_OUT";

fn protocol_catalog() -> Catalog {
    synthetic_catalog(16, 40, 5)
}

fn plan_uids(catalog: &Catalog) -> String {
    let plan = plan_evaluation(catalog, 5, 1, 2024).unwrap();
    serde_json::to_string(&plan).unwrap()
}

/// Helper for criterion 5: prints a plan from a separate process.
#[test]
fn plan_dump_child() {
    if let Ok(path) = std::env::var(CHILD_ENV) {
        std::fs::write(path, plan_uids(&protocol_catalog())).unwrap();
    }
}

fn check_episode(ep: &Episode, n: usize, k: usize) -> Outcome {
    let labels: BTreeSet<&String> = ep.label_ids.iter().collect();
    ensure(labels.len() == n, || "labels not distinct".into())?;
    ensure(ep.support.keys().collect::<BTreeSet<_>>() == labels, || "support keys differ from labels".into())?;
    let mut seen = HashSet::new();
    for (label, support) in &ep.support {
        ensure(support.len() == k, || format!("{label} has {} shots", support.len()))?;
        for s in support {
            ensure(&s.label_id == label, || "support under the wrong label".into())?;
            ensure(seen.insert(s.instance_uid.clone()), || "repeated support instance".into())?;
        }
    }
    let mut per_label: BTreeMap<&String, usize> = BTreeMap::new();
    for q in &ep.queries {
        ensure(labels.contains(&q.label_id), || "query outside the episode labels".into())?;
        ensure(seen.insert(q.instance_uid.clone()), || "query overlaps support or repeats".into())?;
        *per_label.entry(&q.label_id).or_default() += 1;
    }
    let (lo, hi) = (per_label.values().min().copied(), per_label.values().max().copied());
    ensure(hi.unwrap_or(0) - lo.unwrap_or(0) <= 1, || "queries not stratified".into())?;
    ensure(per_label.len() == n.min(ep.queries.len()), || "a label got no query".into())
}

// 5
fn episode_protocol() -> Outcome {
    let catalog = protocol_catalog();
    for n in [5usize, 10] {
        for k in [1usize, 5] {
            let plan = plan_evaluation(&catalog, n, k, 7).map_err(|e| e.to_string())?;
            let total: usize = plan.episodes.iter().map(|e| e.queries.len()).sum();
            ensure(total == 100 * n && plan.queries_total == 100 * n, || format!("{n}-way plan has {total} queries"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000u64 {
        let n = [5usize, 10][rng.random_range(0..2)];
        let k = [1usize, 5][rng.random_range(0..2)];
        let q = rng.random_range(1..=3 * n);
        let ep = sample_episode(&catalog, n, k, q, episode_seed(99, i)).map_err(|e| e.to_string())?;
        check_episode(&ep, n, k).map_err(|e| format!("episode {i}: {e}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut dumps = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("plan-{run}.json"));
        let status = std::process::Command::new(&exe)
            .args(["plan_dump_child", "--exact", "--test-threads=1", "--quiet"])
            .env(CHILD_ENV, &out)
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), || format!("child process failed: {status}"))?;
        dumps.push(std::fs::read_to_string(&out).map_err(|e| e.to_string())?);
    }
    ensure(dumps[0] == dumps[1], || "plans differ between processes".into())?;
    ensure(dumps[0] == plan_uids(&catalog), || "child plan differs from this process".into())
}

fn record(seed: u64, i: usize, correct: bool) -> EvalRecord {
    EvalRecord {
        base_seed: seed,
        episode_index: i,
        episode_seed: 0,
        query_uid: format!("q{i}"),
        gold: format!("L{:02}", i % 3),
        predicted: Some(if correct { format!("L{:02}", i % 3) } else { "LXX".into() }),
        method: PredictionMethod::Exact,
        prompt_digest: String::new(),
        raw_completion: String::new(),
    }
}

// 6
fn end_to_end_mock() -> Outcome {
    let labels = 8;
    let catalog = synthetic_catalog(labels, 12, 6);
    for method in Method::ALL {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let config = RunConfig {
            base_seeds: vec![1, 2, 3],
            ..mock_run_config(dir.path(), &catalog, &echo_gold_script(labels), method)
        };
        let r = Pipeline::from_config(config).and_then(|p| p.run()).map_err(|e| e.to_string())?.report;
        ensure(r.accuracy == 1.0 && r.mean == 1.0 && r.std == 0.0, || {
            format!("{}: {} ± {}", method.as_str(), r.mean, r.std)
        })?;
        ensure(r.per_seed.iter().all(|s| s.queries == 500), || "wrong query count".into())?;
    }

    // Off-label output is never credited.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let script = fixed_answer_script(labels, "\"weather forecast\"");
    let config = RunConfig {
        base_seeds: vec![1, 2, 3],
        queries_per_label: 20,
        ..mock_run_config(dir.path(), &catalog, &script, Method::VanillaIcl)
    };
    let r = Pipeline::from_config(config).and_then(|p| p.run()).map_err(|e| e.to_string())?.report;
    ensure(r.accuracy == 0.0 && r.std == 0.0, || format!("off-label output scored {}", r.accuracy))?;

    // A constant in-set answer is right once per batch of n.
    let small = synthetic_catalog(5, 30, 6);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let script = fixed_answer_script(5, &format!("\"{}\"", label_name(3)));
    let config = RunConfig {
        base_seeds: vec![1, 2, 3],
        queries_per_label: 20,
        ..mock_run_config(dir.path(), &small, &script, Method::CotErAuto)
    };
    let r = Pipeline::from_config(config).and_then(|p| p.run()).map_err(|e| e.to_string())?.report;
    ensure(r.per_seed.iter().all(|s| s.accuracy == 0.2), || format!("constant answer scored {:?}", r.per_seed))?;

    // Seeds scoring 4/4, 2/4 and 3/4: mean 0.75, sample std 0.25.
    let mut records = Vec::new();
    for (seed, correct) in [(1u64, 4usize), (2, 2), (3, 3)] {
        records.extend((0..4).map(|i| record(seed, i, i < correct)));
    }
    let r = RunReport::build(serde_json::json!({}), &[1, 2, 3], &records, &[], "records.csv").map_err(|e| e.to_string())?;
    ensure((r.mean - 0.75).abs() < 1e-12 && (r.std - 0.25).abs() < 1e-12, || format!("{} ± {}", r.mean, r.std))?;
    ensure((r.accuracy - 0.75).abs() < 1e-12, || "pooled accuracy".into())
}

// 7
fn parser_suite() -> Outcome {
    for text in [common::SEEDS_FEWREL1, common::SEEDS_FEWREL2] {
        let seeds = SeedSet::from_json(text).map_err(|e| e.to_string())?;
        let labels: Vec<RelationLabel> = seeds.iter().map(|s| RelationLabel::new(&s.label_id, &s.label_name)).collect();
        for s in seeds.iter() {
            let p = parse_prediction(&s.conclusion, &labels);
            ensure(p.label_id.as_deref() == Some(s.label_id.as_str()), || format!("{} parsed as {:?}", s.label_id, p.label_id))?;
            ensure(p.method == PredictionMethod::ConclusionPattern, || format!("{} via {:?}", s.label_id, p.method))?;
            let full = s.reasoning_text();
            ensure(parse_prediction(&full, &labels).label_id.as_deref() == Some(s.label_id.as_str()), || {
                format!("{} full reasoning misparsed", s.label_id)
            })?;
        }
    }
    let set = |names: &[&str]| -> Vec<RelationLabel> { names.iter().map(|n| RelationLabel::new(*n, *n)).collect() };
    let cases: Vec<(Vec<RelationLabel>, &str, &str)> = vec![
        (set(&["part of", "member of"]), "Chris Lowe is a member of the Pet Shop Boys", "member of"),
        (set(&["member of", "part of"]), "the telescope was part of the observatory", "part of"),
        (set(&["part of", "member of", "has part"]), "It is a member of it, not part of it", "member of"),
        (set(&["classified as", "gene found in organism"]), "The disease is classified as primary infection.", "classified as"),
        (set(&["location", "headquarters location"]), "its headquarters location is Paris", "headquarters location"),
        (set(&["headquarters location", "location"]), "The answer: headquarters location.", "headquarters location"),
        (set(&["part of", "member of"]), "So, the relation is \"part of\" rather than member of", "part of"),
    ];
    for (labels, text, want) in cases {
        let p = parse_prediction(text, &labels);
        ensure(p.label_id.as_deref() == Some(want), || format!("{text:?} parsed as {:?}", p.label_id))?;
    }
    Ok(())
}

// 8
fn cache_and_retry() -> Outcome {
    let server = serve(vec![Reply::json(429, serde_json::json!({"error": "rate"})).header("Retry-After", "0"), completion("sport")]);
    let provider = |url: &str| {
        LiveProvider::new(LiveConfig {
            retry: RetryPolicy {
                max_retries: 5,
                base_delay: Duration::ZERO,
                max_delay: Duration::ZERO,
            },
            ..LiveConfig::new(url, "k")
        })
    };
    let cache = tempfile::tempdir().map_err(|e| e.to_string())?;
    let request = CompletionRequest::new("m", "prompt");
    let first = Backend::new(provider(&server.base_url)).with_cache_dir(cache.path());
    let text = first.complete(&request).map_err(|e| e.to_string())?;
    let stats = first.stats();
    ensure(text == "sport" && stats.retries == 1 && stats.live_calls == 1, || format!("{stats:?}"))?;
    let second = Backend::new(provider(&server.base_url)).with_cache_dir(cache.path());
    second.complete(&request).map_err(|e| e.to_string())?;
    ensure(second.stats().live_calls == 0, || "repeat run called the server".into())?;
    let requests = server.requests.lock().unwrap().len();
    ensure(requests == 2, || format!("server saw {requests} requests, expected 2"))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(u8, &str, Duration, fn() -> Outcome); 8] = [
        (1, "golden prompts", Duration::from_secs(1), golden_prompts),
        (2, "retrieval oracle", Duration::from_secs(5), retrieval_oracle),
        (3, "packing counts 5/10/13", Duration::from_secs(1), packing_counts),
        (4, "prototype oracle", Duration::from_secs(5), prototype_oracle),
        (5, "episode protocol", Duration::from_secs(10), episode_protocol),
        (6, "end-to-end mock runs", Duration::from_secs(60), end_to_end_mock),
        (7, "parser suite", Duration::from_secs(1), parser_suite),
        (8, "cache and retry", Duration::from_secs(5), cache_and_retry),
    ];
    let mut failed = Vec::new();
    for (id, name, limit, check) in criteria {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = outcome.and_then(|()| ensure(took <= limit, || format!("took {took:.2?}, limit {limit:?}")));
        match &outcome {
            Ok(()) => announce!("criterion {id} PASS {name} ({took:.2?})"),
            Err(e) => {
                announce!("criterion {id} FAIL {name} ({took:.2?}): {e}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

// 9
#[test]
fn live_smoke() {
    if std::env::var("FSRE_LIVE_SMOKE").as_deref() != Ok("1") {
        announce!("criterion 9 SKIP live smoke (set FSRE_LIVE_SMOKE=1 and FSRE_API_KEY to run)");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let env = |k: &str, d: &str| std::env::var(k).unwrap_or_else(|_| d.to_string());
    let config = RunConfig {
        dataset: Some(common::fixture("data/sample_val.json")),
        label_meta: Some(root.join("data/labels/fewrel1_val.json")),
        seeds_file: Some(root.join("data/seeds/fewrel1_val.json")),
        method: env("FSRE_LIVE_METHOD", "cot-er-auto").parse().unwrap(),
        model: env("FSRE_LIVE_MODEL", "gpt-3.5-turbo-instruct"),
        embedding_model: env("FSRE_LIVE_EMBEDDING_MODEL", "text-embedding-3-small"),
        n: 5,
        k: 1,
        queries_per_label: 4,
        base_seeds: vec![1],
        cache_dir: dir.path().join("cache"),
        output_dir: dir.path().join("out"),
        ..RunConfig::default()
    };
    let outcome = Pipeline::from_config(config).and_then(|p| p.run()).expect("live run");
    let total = outcome.records.len();
    let parsed = outcome.records.iter().filter(|r| r.method != PredictionMethod::Unparsed).count();
    let rate = parsed as f64 / total as f64;
    let ok = total == 20 && rate >= 0.95;
    announce!("criterion 9 {} live smoke: {parsed}/{total} completions parsed", if ok { "PASS" } else { "FAIL" });
    assert!(ok);
}

#[test]
fn shuffled_candidates_rank_identically() {
    // Ranking must not depend on input order, including for ties.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let backend = hash_backend(8);
    let query = random_instance(&mut rng, 3);
    let mut cands: Vec<RelationInstance> = (0..25).map(|_| random_instance(&mut rng, 3)).collect();
    let rank = |c: Vec<RelationInstance>| -> Vec<InstanceUid> {
        rank_candidates(c, &query, &backend, "emb", |_: &RelationInstance| 1)
            .unwrap()
            .into_iter()
            .map(|s| s.candidate.instance_uid)
            .collect()
    };
    let a = rank(cands.clone());
    cands.shuffle(&mut rng);
    assert_eq!(rank(cands), a);
}
