//! Reproducible N-way K-shot episode sampling.
//!
//! Randomness comes from ChaCha20 (a counter-based generator) seeded with a
//! 64-bit seed. Episode seeds are split from a base seed with
//! [`episode_seed`], so a plan is reproducible on any machine.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Catalog, InstanceUid, RelationInstance};
use crate::digest;

/// Queries per relation under the default protocol (100 × N in total).
pub const QUERIES_PER_LABEL: usize = 100;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum EpisodeError {
    #[error("catalog has {available} relations but the task needs {needed}")]
    InsufficientLabels { needed: usize, available: usize },
    #[error("relation {label} has {available} instances but the episode needs {needed}")]
    InsufficientInstances {
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("invalid task shape: {0}")]
    InvalidShape(String),
    #[error("plan references instance {0} which is not in the catalog")]
    UnknownInstance(InstanceUid),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub label_ids: Vec<String>,
    pub support: BTreeMap<String, Vec<RelationInstance>>,
    pub queries: Vec<RelationInstance>,
    pub seed: u64,
    pub n: usize,
    pub k: usize,
}

impl Episode {
    /// Support instances in label-id then uid order.
    pub fn support_instances(&self) -> impl Iterator<Item = &RelationInstance> {
        self.support.values().flatten()
    }

    pub fn support_uids(&self) -> Vec<InstanceUid> {
        self.support_instances().map(|i| i.instance_uid.clone()).collect()
    }

    pub fn query_uids(&self) -> Vec<InstanceUid> {
        self.queries.iter().map(|i| i.instance_uid.clone()).collect()
    }

    /// Checks every structural invariant; used by tests and by plan replay.
    pub fn validate(&self) -> Result<(), String> {
        let distinct: HashSet<&String> = self.label_ids.iter().collect();
        if distinct.len() != self.label_ids.len() || self.label_ids.len() != self.n {
            return Err("label ids must be n distinct relations".into());
        }
        for label in &self.label_ids {
            let support = self.support.get(label).ok_or(format!("no support for {label}"))?;
            if support.len() != self.k || support.iter().any(|i| &i.label_id != label) {
                return Err(format!("support of {label} is not k instances of that label"));
            }
        }
        let support_uids: HashSet<InstanceUid> = self.support_uids().into_iter().collect();
        for q in &self.queries {
            if !distinct.contains(&q.label_id) {
                return Err(format!("query {} has an out-of-episode label", q.instance_uid));
            }
            if support_uids.contains(&q.instance_uid) {
                return Err(format!("query {} also appears in support", q.instance_uid));
            }
        }
        Ok(())
    }
}

/// Seed of episode `index` under `base_seed`: the first 8 bytes (little
/// endian) of SHA-256 over a domain tag, the base seed and the index.
pub fn episode_seed(base_seed: u64, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(32);
    buf.extend_from_slice(b"fsre/episode");
    buf.extend_from_slice(&base_seed.to_le_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    let d = digest::sha256(&buf);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Number of queries each label position receives when `total` queries are
/// dealt round-robin over `n` labels.
fn round_robin_counts(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

/// Samples one episode. Labels are drawn uniformly without replacement; each
/// label's instances are shuffled, the first `k` become support and queries
/// are dealt round-robin over the labels from the remainder.
pub fn sample_episode(
    catalog: &Catalog,
    n: usize,
    k: usize,
    queries_per_episode: usize,
    seed: u64,
) -> Result<Episode, EpisodeError> {
    if n == 0 || k == 0 {
        return Err(EpisodeError::InvalidShape(format!("n={n}, k={k}")));
    }
    let all_labels = catalog.label_ids();
    if all_labels.len() < n {
        return Err(EpisodeError::InsufficientLabels {
            needed: n,
            available: all_labels.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut shuffled = all_labels;
    let (chosen, _) = shuffled.partial_shuffle(&mut rng, n);
    let label_ids: Vec<String> = chosen.to_vec();

    let counts = round_robin_counts(queries_per_episode, n);
    let per_label_queries = queries_per_episode.div_ceil(n);
    for label in &label_ids {
        let available = catalog.instances(label).len();
        let needed = k + per_label_queries;
        if available < needed {
            return Err(EpisodeError::InsufficientInstances {
                label: label.clone(),
                needed,
                available,
            });
        }
    }

    let mut support = BTreeMap::new();
    let mut pools: Vec<Vec<&RelationInstance>> = Vec::with_capacity(n);
    for label in &label_ids {
        let mut pool: Vec<&RelationInstance> = catalog.instances(label).iter().collect();
        pool.shuffle(&mut rng);
        let rest = pool.split_off(k);
        support.insert(label.clone(), pool.into_iter().cloned().collect::<Vec<_>>());
        pools.push(rest);
    }

    let mut queries = Vec::with_capacity(queries_per_episode);
    let max_count = counts.iter().copied().max().unwrap_or(0);
    for round in 0..max_count {
        for (pos, pool) in pools.iter().enumerate() {
            if round < counts[pos] {
                queries.push(pool[round].clone());
            }
        }
    }

    Ok(Episode {
        label_ids,
        support,
        queries,
        seed,
        n,
        k,
    })
}

/// How the 100 × N queries are spread over episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub queries_per_label: usize,
    /// One support set for all queries instead of a fresh one per batch of N.
    pub fixed_support: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            queries_per_label: QUERIES_PER_LABEL,
            fixed_support: false,
        }
    }
}

/// Replayable record of one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub index: usize,
    pub seed: u64,
    pub label_ids: Vec<String>,
    pub support: BTreeMap<String, Vec<InstanceUid>>,
    pub queries: Vec<InstanceUid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub n: usize,
    pub k: usize,
    pub queries_total: usize,
    pub base_seed: u64,
    pub options: PlanOptions,
    pub episodes: Vec<EpisodeSpec>,
}

impl TaskPlan {
    /// Resolves the plan's uids against a catalog.
    pub fn episodes(&self, catalog: &Catalog) -> Result<Vec<Episode>, EpisodeError> {
        let resolve = |uid: &InstanceUid| {
            catalog
                .instance(uid)
                .cloned()
                .ok_or_else(|| EpisodeError::UnknownInstance(uid.clone()))
        };
        self.episodes
            .iter()
            .map(|spec| {
                let support = spec
                    .support
                    .iter()
                    .map(|(label, uids)| {
                        Ok((label.clone(), uids.iter().map(resolve).collect::<Result<Vec<_>, _>>()?))
                    })
                    .collect::<Result<BTreeMap<_, _>, EpisodeError>>()?;
                Ok(Episode {
                    label_ids: spec.label_ids.clone(),
                    support,
                    queries: spec.queries.iter().map(resolve).collect::<Result<_, _>>()?,
                    seed: spec.seed,
                    n: self.n,
                    k: self.k,
                })
            })
            .collect()
    }
}

impl From<(usize, &Episode)> for EpisodeSpec {
    fn from((index, e): (usize, &Episode)) -> Self {
        Self {
            index,
            seed: e.seed,
            label_ids: e.label_ids.clone(),
            support: e
                .support
                .iter()
                .map(|(l, v)| (l.clone(), v.iter().map(|i| i.instance_uid.clone()).collect()))
                .collect(),
            queries: e.query_uids(),
        }
    }
}

/// Plan under the default protocol: 100 × N queries, a fresh support set
/// for every batch of N queries.
pub fn plan_evaluation(
    catalog: &Catalog,
    n: usize,
    k: usize,
    base_seed: u64,
) -> Result<TaskPlan, EpisodeError> {
    plan_evaluation_with(catalog, n, k, base_seed, PlanOptions::default())
}

pub fn plan_evaluation_with(
    catalog: &Catalog,
    n: usize,
    k: usize,
    base_seed: u64,
    options: PlanOptions,
) -> Result<TaskPlan, EpisodeError> {
    if options.queries_per_label == 0 {
        return Err(EpisodeError::InvalidShape("queries_per_label must be ≥ 1".into()));
    }
    let queries_total = options.queries_per_label * n;
    let batches: Vec<usize> = if options.fixed_support {
        vec![queries_total]
    } else {
        vec![n; options.queries_per_label]
    };
    let episodes = batches
        .iter()
        .enumerate()
        .map(|(i, &q)| {
            let seed = episode_seed(base_seed, i as u64);
            sample_episode(catalog, n, k, q, seed).map(|e| EpisodeSpec::from((i, &e)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TaskPlan {
        n,
        k,
        queries_total,
        base_seed,
        options,
        episodes,
    })
}
