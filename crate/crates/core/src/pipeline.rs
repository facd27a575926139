//! End-to-end runs: plans, candidate sets, retrieval, prompting, scoring,
//! per-episode checkpoints and the output files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, CacheOnlyProvider, CompletionRequest, LiveConfig, LiveProvider, MockProvider, MockScript};
use crate::baselines::{build_prototypes, embedding_text, prototype_classify};
use crate::config::{BackendKind, ConfigError, Method, RunConfig};
use crate::corpus::{load_catalog, Catalog, CorpusError, InstanceUid, RelationInstance, RelationLabel};
use crate::episodes::{plan_evaluation_with, Episode, EpisodeError, PlanOptions, TaskPlan};
use crate::evaluation::{write_records_csv, EvalError, EvalRecord, RunReport};
use crate::prompting::{
    auto_cot_demo_block, auto_cot_query_block, cot_er_demo_block, cot_er_query_block, parse_prediction,
    render_auto_cot, render_cot_er, render_task_header, render_vanilla_icl, truncate_completion, vanilla_demo_block,
    vanilla_query_block, PredictionMethod, PromptError, PromptKind, PromptVariant, RenderedPrompt, BLOCK_SEPARATOR,
};
use crate::reasoning::{
    generate_auto_cot_set, generate_candidate_set, manual_candidate_set, GenerationSettings, ReasonedInstance,
    ReasoningError, SeedError, SeedSet,
};
use crate::retrieval::{pack_demonstrations, rank_candidates, Candidate, RetrievalError, ScoredCandidate};

pub const REPORT_FILE: &str = "report.json";
pub const RECORDS_FILE: &str = "records.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Seed(#[from] SeedError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Reasoning(#[from] ReasoningError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("I/O on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

/// Process exit classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Backend,
    Data,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Backend => 3,
            ErrorClass::Data => 4,
        }
    }
}

fn backend_class(e: &BackendError) -> ErrorClass {
    match e {
        BackendError::MissingCredential | BackendError::MockScript(_) => ErrorClass::Config,
        _ => ErrorClass::Backend,
    }
}

impl PipelineError {
    pub fn class(&self) -> ErrorClass {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => ErrorClass::Config,
            PipelineError::Backend(e) => backend_class(e),
            PipelineError::Reasoning(ReasoningError::Backend { source, .. }) => backend_class(source),
            PipelineError::Retrieval(RetrievalError::Backend(e)) => backend_class(e),
            // A budget that cannot hold one demonstration is a settings problem.
            PipelineError::Retrieval(RetrievalError::NothingFits { .. } | RetrievalError::ZeroCap)
            | PipelineError::Prompt(PromptError::NoDemonstrations) => ErrorClass::Config,
            _ => ErrorClass::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.class().exit_code()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Backend described by the config, with its disk cache.
pub fn build_backend(config: &RunConfig) -> Result<Backend, PipelineError> {
    let backend = match config.backend {
        BackendKind::Mock => {
            let path = config
                .mock_script
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid("the mock backend needs a mock script".into()))?;
            let script = MockScript::load(path).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            Backend::new(MockProvider::new(script).map_err(|e| ConfigError::Invalid(e.to_string()))?)
        }
        BackendKind::Live => {
            let mut live = LiveConfig::from_env(config.base_url.as_deref())?;
            live.retry.max_retries = config.max_retries;
            Backend::new(LiveProvider::new(live))
        }
    };
    Ok(backend.with_cache_dir(&config.cache_dir).with_parallelism(config.parallelism))
}

/// A backend that only replays the cache of `config`.
pub fn offline_backend(config: &RunConfig) -> Backend {
    Backend::new(CacheOnlyProvider)
        .with_cache_dir(&config.cache_dir)
        .with_parallelism(config.parallelism)
}

/// Where a demonstration candidate came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateInfo {
    pub uid: InstanceUid,
    pub label_id: String,
    pub valid: bool,
    pub reasoning: Option<String>,
    pub generation_prompt_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    pub uid: InstanceUid,
    /// In prompt order.
    pub demo_uids: Vec<InstanceUid>,
    /// Distances of the selected demonstrations, nearest first.
    pub distances: Vec<f64>,
    pub prompt_digest: String,
    pub est_tokens: usize,
}

/// Everything one episode produced. Also the checkpoint format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub base_seed: u64,
    pub index: usize,
    pub seed: u64,
    /// In the order the prompt header lists them.
    pub label_ids: Vec<String>,
    pub candidates: Vec<CandidateInfo>,
    /// Texts embedded for each prototype, by label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_texts: Option<BTreeMap<String, Vec<String>>>,
    pub queries: Vec<QueryTrace>,
    pub records: Vec<EvalRecord>,
    pub prompts: BTreeMap<String, String>,
}

impl EpisodeOutcome {
    pub fn demo_counts(&self) -> impl Iterator<Item = usize> + '_ {
        self.queries.iter().map(|q| q.demo_uids.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub base_seed: u64,
    pub index: usize,
    pub seed: u64,
    pub label_ids: Vec<String>,
    pub candidates: Vec<CandidateInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_texts: Option<BTreeMap<String, Vec<String>>>,
    pub queries: Vec<QueryTrace>,
}

/// Enough to replay a run: settings, plans, per-query provenance and every
/// prompt keyed by digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub config_digest: String,
    pub plans: Vec<TaskPlan>,
    pub episodes: Vec<EpisodeManifest>,
    pub prompts: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: RunReport,
    pub records: Vec<EvalRecord>,
    pub manifest: Manifest,
}

/// Prompts for one episode, before any completion call.
#[derive(Debug, Clone)]
pub struct PreparedEpisode {
    pub label_ids: Vec<String>,
    pub candidates: Vec<CandidateInfo>,
    pub prompts: Vec<(RelationInstance, RenderedPrompt, Vec<f64>)>,
}

pub struct Pipeline {
    config: RunConfig,
    catalog: Catalog,
    seeds: Option<SeedSet>,
    backend: Backend,
}

enum CandidateSet {
    Plain(Vec<RelationInstance>),
    Reasoned(Vec<ReasonedInstance>),
}

impl Pipeline {
    /// Loads data, seeds and backend as the config describes.
    pub fn from_config(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let backend = build_backend(&config)?;
        Self::with_backend(config, backend)
    }

    /// Same as [`Pipeline::from_config`] with a caller-supplied backend.
    pub fn with_backend(config: RunConfig, backend: Backend) -> Result<Self, PipelineError> {
        config.validate()?;
        let dataset = config.dataset.as_ref().expect("validated");
        let catalog = load_catalog(dataset, config.label_meta.as_deref())?;
        let seeds = match &config.seeds_file {
            Some(p) if config.method.needs_seeds() => Some(SeedSet::load(p)?),
            _ => None,
        };
        Ok(Self {
            config,
            catalog,
            seeds,
            backend,
        })
    }

    pub fn from_parts(config: RunConfig, catalog: Catalog, seeds: Option<SeedSet>, backend: Backend) -> Result<Self, PipelineError> {
        if config.method.needs_seeds() && seeds.is_none() {
            return Err(ConfigError::Invalid("cot-er methods need a seeds file".into()).into());
        }
        Ok(Self {
            config,
            catalog,
            seeds,
            backend,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    pub fn plan(&self, base_seed: u64) -> Result<TaskPlan, PipelineError> {
        let options = PlanOptions {
            queries_per_label: self.config.queries_per_label,
            fixed_support: self.config.fixed_support,
        };
        Ok(plan_evaluation_with(&self.catalog, self.config.n, self.config.k, base_seed, options)?)
    }

    fn estimate(&self, text: &str) -> usize {
        self.backend.estimate_tokens(text, &self.config.model)
    }

    fn generation_settings(&self) -> GenerationSettings {
        GenerationSettings {
            model: self.config.model.clone(),
            max_output_tokens: self.config.output_reserve as u32,
        }
    }

    fn seeds(&self) -> Result<&SeedSet, PipelineError> {
        self.seeds
            .as_ref()
            .ok_or_else(|| ConfigError::Invalid("cot-er methods need a seeds file".into()).into())
    }

    fn labels(&self, ids: &[String]) -> Result<Vec<RelationLabel>, PipelineError> {
        ids.iter()
            .map(|id| {
                self.catalog
                    .label(id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownLabel(id.clone()).into())
            })
            .collect()
    }

    fn candidate_set(&self, episode: &Episode) -> Result<CandidateSet, PipelineError> {
        let settings = self.generation_settings();
        Ok(match self.config.method {
            Method::CotErAuto | Method::CotErAblated => CandidateSet::Reasoned(generate_candidate_set(
                episode,
                self.seeds()?,
                &self.catalog,
                &self.backend,
                &settings,
            )?),
            Method::CotErManual => CandidateSet::Reasoned(manual_candidate_set(episode, self.seeds()?)?),
            Method::AutoCot | Method::AutoCotReasoning => {
                CandidateSet::Reasoned(generate_auto_cot_set(episode, &self.backend, &settings)?)
            }
            Method::VanillaIcl | Method::Proto => {
                let mut support: Vec<RelationInstance> = episode.support_instances().cloned().collect();
                support.sort_by(|a, b| (&a.label_id, &a.instance_uid).cmp(&(&b.label_id, &b.instance_uid)));
                CandidateSet::Plain(support)
            }
        })
    }

    /// Ranks `candidates` for `query` and keeps the longest nearest-first
    /// prefix that fits the prompt budget.
    fn select<'c, C: Candidate>(
        &self,
        candidates: &'c [C],
        query: &RelationInstance,
        overhead: usize,
        block: impl Fn(&C) -> Result<String, PromptError>,
    ) -> Result<Vec<ScoredCandidate<&'c C>>, PipelineError> {
        let costs = candidates
            .iter()
            .map(|c| Ok(self.estimate(&format!("{}{BLOCK_SEPARATOR}", block(c)?))))
            .collect::<Result<Vec<usize>, PromptError>>()?;
        let by_uid: BTreeMap<&InstanceUid, usize> = candidates
            .iter()
            .zip(&costs)
            .map(|(c, &t)| (&c.instance().instance_uid, t))
            .collect();
        let refs: Vec<&C> = candidates.iter().collect();
        let ranked = rank_candidates(refs, query, &self.backend, &self.config.embedding_model, |c| {
            by_uid[&c.instance().instance_uid]
        })?;
        Ok(pack_demonstrations(
            ranked,
            overhead,
            self.config.prompt_budget(),
            self.config.m_cap,
        )?)
    }

    /// Builds candidates and renders one prompt per query. Not used by the
    /// prototype baseline.
    pub fn prepare_episode(&self, episode: &Episode) -> Result<PreparedEpisode, PipelineError> {
        let kind = self
            .config
            .method
            .prompt_kind()
            .ok_or_else(|| PipelineError::Usage("the prototype baseline renders no prompts".into()))?;
        let variant = PromptVariant::new(kind, self.config.demo_order, self.labels(&episode.label_ids)?)?;
        let header_cost = self.estimate(&format!("{}{BLOCK_SEPARATOR}", render_task_header(&variant.labels)?));
        let estimate = |t: &str| self.estimate(t);
        let set = self.candidate_set(episode)?;
        let mut prompts = Vec::with_capacity(episode.queries.len());
        let candidates = match &set {
            CandidateSet::Plain(plain) => {
                for q in &episode.queries {
                    let overhead = header_cost + self.estimate(&vanilla_query_block(q));
                    let picked = self.select(plain, q, overhead, |d| Ok(vanilla_demo_block(d, variant.label(&d.label_id)?)))?;
                    let distances = picked.iter().map(|s| s.distance).collect();
                    let demos: Vec<&RelationInstance> = picked.into_iter().map(|s| s.candidate).collect();
                    prompts.push((q.clone(), render_vanilla_icl(&demos, q, &variant, &estimate)?, distances));
                }
                plain
                    .iter()
                    .map(|i| CandidateInfo {
                        uid: i.instance_uid.clone(),
                        label_id: i.label_id.clone(),
                        valid: true,
                        reasoning: None,
                        generation_prompt_digest: None,
                    })
                    .collect()
            }
            CandidateSet::Reasoned(reasoned) => {
                let templates = match &self.seeds {
                    Some(s) => s.templates(),
                    None => BTreeMap::new(),
                };
                let ablated = kind == PromptKind::CotErAblated;
                for q in &episode.queries {
                    let (query_block, is_cot_er) = match kind {
                        PromptKind::CotEr | PromptKind::CotErAblated => (cot_er_query_block(q), true),
                        PromptKind::AutoCot => (auto_cot_query_block(q, false), false),
                        _ => (auto_cot_query_block(q, true), false),
                    };
                    let overhead = header_cost + self.estimate(&query_block);
                    let picked = self.select(reasoned, q, overhead, |d| {
                        let label = variant.label(&d.instance.label_id)?;
                        if is_cot_er {
                            cot_er_demo_block(d, label, ablated, templates.get(&label.id).map(String::as_str))
                        } else {
                            Ok(auto_cot_demo_block(d, label))
                        }
                    })?;
                    let distances = picked.iter().map(|s| s.distance).collect();
                    let demos: Vec<&ReasonedInstance> = picked.into_iter().map(|s| s.candidate).collect();
                    let rendered = if is_cot_er {
                        render_cot_er(&demos, q, &variant, &templates, &estimate)?
                    } else {
                        render_auto_cot(&demos, q, &variant, &estimate)?
                    };
                    prompts.push((q.clone(), rendered, distances));
                }
                reasoned
                    .iter()
                    .map(|r| CandidateInfo {
                        uid: r.instance.instance_uid.clone(),
                        label_id: r.instance.label_id.clone(),
                        valid: r.valid,
                        reasoning: Some(r.reasoning.clone()),
                        generation_prompt_digest: r.generation_prompt_digest.clone(),
                    })
                    .collect()
            }
        };
        Ok(PreparedEpisode {
            label_ids: episode.label_ids.clone(),
            candidates,
            prompts,
        })
    }

    pub fn run_episode(&self, base_seed: u64, index: usize, episode: &Episode) -> Result<EpisodeOutcome, PipelineError> {
        if self.config.method == Method::Proto {
            return self.run_prototype_episode(base_seed, index, episode);
        }
        let prepared = self.prepare_episode(episode)?;
        let requests: Vec<CompletionRequest> = prepared
            .prompts
            .iter()
            .map(|(_, p, _)| {
                CompletionRequest::new(&self.config.model, p.text.as_str())
                    .with_max_output_tokens(self.config.output_reserve as u32)
            })
            .collect();
        let completions = self.backend.complete_many(&requests);
        let labels = self.labels(&episode.label_ids)?;
        let mut outcome = EpisodeOutcome {
            base_seed,
            index,
            seed: episode.seed,
            label_ids: prepared.label_ids,
            candidates: prepared.candidates,
            prototype_texts: None,
            queries: Vec::new(),
            records: Vec::new(),
            prompts: BTreeMap::new(),
        };
        for ((query, prompt, distances), completion) in prepared.prompts.into_iter().zip(completions) {
            let raw = completion?;
            let prediction = parse_prediction(truncate_completion(&raw), &labels);
            let digest = prompt.digest();
            outcome.records.push(EvalRecord {
                base_seed,
                episode_index: index,
                episode_seed: episode.seed,
                query_uid: query.instance_uid.0.clone(),
                gold: query.label_id.clone(),
                predicted: prediction.label_id,
                method: prediction.method,
                prompt_digest: digest.clone(),
                raw_completion: raw,
            });
            outcome.queries.push(QueryTrace {
                uid: query.instance_uid.clone(),
                demo_uids: prompt.demo_uids,
                distances,
                prompt_digest: digest.clone(),
                est_tokens: prompt.est_tokens,
            });
            outcome.prompts.insert(digest, prompt.text);
        }
        Ok(outcome)
    }

    fn run_prototype_episode(&self, base_seed: u64, index: usize, episode: &Episode) -> Result<EpisodeOutcome, PipelineError> {
        let model = &self.config.embedding_model;
        let mode = self.config.text_mode;
        let prototypes = build_prototypes(episode, &self.backend, model, mode)?;
        let texts = episode
            .support
            .iter()
            .map(|(l, v)| (l.clone(), v.iter().map(|i| embedding_text(i, mode)).collect()))
            .collect();
        let mut records = Vec::with_capacity(episode.queries.len());
        for q in &episode.queries {
            let label = prototype_classify(&prototypes, q, &self.backend, model, mode)?;
            records.push(EvalRecord {
                base_seed,
                episode_index: index,
                episode_seed: episode.seed,
                query_uid: q.instance_uid.0.clone(),
                gold: q.label_id.clone(),
                predicted: Some(label.clone()),
                method: PredictionMethod::Prototype,
                prompt_digest: String::new(),
                raw_completion: label,
            });
        }
        Ok(EpisodeOutcome {
            base_seed,
            index,
            seed: episode.seed,
            label_ids: episode.label_ids.clone(),
            candidates: Vec::new(),
            prototype_texts: Some(texts),
            queries: Vec::new(),
            records,
            prompts: BTreeMap::new(),
        })
    }

    fn checkpoint_path(&self, base_seed: u64, index: usize) -> PathBuf {
        self.config
            .output_dir
            .join("checkpoints")
            .join(self.config.digest())
            .join(format!("seed-{base_seed}"))
            .join(format!("episode-{index}.json"))
    }

    fn load_checkpoint(&self, path: &Path, episode: &Episode) -> Option<EpisodeOutcome> {
        let text = std::fs::read_to_string(path).ok()?;
        match serde_json::from_str::<EpisodeOutcome>(&text) {
            Ok(o) if o.seed == episode.seed && o.records.len() == episode.queries.len() => Some(o),
            _ => {
                log::warn!("ignoring stale checkpoint {}", path.display());
                None
            }
        }
    }

    fn save_checkpoint(&self, path: &Path, outcome: &EpisodeOutcome) -> Result<(), PipelineError> {
        let dir = path.parent().expect("checkpoint has a parent");
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string(outcome).expect("outcome serializes");
        std::fs::write(&tmp, text).map_err(io_err(&tmp))?;
        std::fs::rename(&tmp, path).map_err(io_err(path))
    }

    /// Runs every base seed, resuming from checkpoints, and writes
    /// report, records and manifest into the output directory.
    pub fn run(&self) -> Result<RunOutcome, PipelineError> {
        let out = &self.config.output_dir;
        std::fs::create_dir_all(out).map_err(io_err(out))?;
        let mut plans = Vec::new();
        let mut outcomes = Vec::new();
        for &base_seed in &self.config.base_seeds {
            let plan = self.plan(base_seed)?;
            for (index, episode) in plan.episodes(&self.catalog)?.iter().enumerate() {
                let path = self.checkpoint_path(base_seed, index);
                let outcome = match self.load_checkpoint(&path, episode) {
                    Some(o) => o,
                    None => {
                        let o = self.run_episode(base_seed, index, episode)?;
                        self.save_checkpoint(&path, &o)?;
                        o
                    }
                };
                outcomes.push(outcome);
            }
            log::info!("base seed {base_seed}: {} episodes", plan.episodes.len());
            plans.push(plan);
        }
        let outcome = assemble(&self.config, plans, outcomes)?;
        write_outputs(out, &outcome)?;
        Ok(outcome)
    }
}

/// Builds report and manifest from finished episodes.
pub fn assemble(config: &RunConfig, plans: Vec<TaskPlan>, outcomes: Vec<EpisodeOutcome>) -> Result<RunOutcome, PipelineError> {
    let mut records = Vec::new();
    let mut demo_counts = Vec::new();
    let mut prompts = BTreeMap::new();
    let mut episodes = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        demo_counts.extend(o.demo_counts());
        records.extend(o.records);
        prompts.extend(o.prompts);
        episodes.push(EpisodeManifest {
            base_seed: o.base_seed,
            index: o.index,
            seed: o.seed,
            label_ids: o.label_ids,
            candidates: o.candidates,
            prototype_texts: o.prototype_texts,
            queries: o.queries,
        });
    }
    let report = RunReport::build(config.echo(), &config.base_seeds, &records, &demo_counts, RECORDS_FILE)?;
    let manifest = Manifest {
        config: config.echo(),
        config_digest: config.digest(),
        plans,
        episodes,
        prompts,
    };
    Ok(RunOutcome {
        report,
        records,
        manifest,
    })
}

pub fn write_outputs(dir: &Path, outcome: &RunOutcome) -> Result<(), PipelineError> {
    outcome.report.write(&dir.join(REPORT_FILE))?;
    write_records_csv(&dir.join(RECORDS_FILE), &outcome.records)?;
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&outcome.manifest).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))
}

/// Recomputes the report of a finished run from its records and manifest.
pub fn rebuild_report(dir: &Path) -> Result<RunReport, PipelineError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
    let records = crate::evaluation::read_records_csv(&dir.join(RECORDS_FILE))?;
    let seeds: Vec<u64> = manifest.plans.iter().map(|p| p.base_seed).collect();
    let demo_counts: Vec<usize> = manifest
        .episodes
        .iter()
        .flat_map(|e| e.queries.iter().map(|q| q.demo_uids.len()))
        .collect();
    Ok(RunReport::build(manifest.config, &seeds, &records, &demo_counts, RECORDS_FILE)?)
}
