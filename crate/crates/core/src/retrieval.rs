//! Nearest-neighbour ranking of demonstration candidates and greedy packing
//! under a token budget.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError};
use crate::corpus::{reconstruct_text, RelationInstance};
use crate::reasoning::ReasonedInstance;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("vectors have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("no candidates to rank")]
    NoCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("budget of {budget} tokens cannot hold the {overhead}-token frame plus the nearest demonstration ({first} tokens)")]
    NothingFits { budget: usize, overhead: usize, first: usize },
    #[error("demonstration cap of 0 leaves an empty prompt")]
    ZeroCap,
}

/// Anything that can serve as a demonstration.
pub trait Candidate {
    fn instance(&self) -> &RelationInstance;
}

impl Candidate for RelationInstance {
    fn instance(&self) -> &RelationInstance {
        self
    }
}

impl Candidate for ReasonedInstance {
    fn instance(&self) -> &RelationInstance {
        &self.instance
    }
}

impl<C: Candidate> Candidate for &C {
    fn instance(&self) -> &RelationInstance {
        (*self).instance()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate<C> {
    pub candidate: C,
    pub distance: f64,
    /// Estimate for the rendered demonstration block including its separator.
    pub est_tokens: usize,
}

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Ascending distance, ties by ascending instance uid.
pub fn sort_scored<C: Candidate>(scored: &mut [ScoredCandidate<C>]) {
    scored.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then_with(|| a.candidate.instance().instance_uid.cmp(&b.candidate.instance().instance_uid))
    });
}

/// Embeds the reconstructed text of the query and every candidate and
/// ranks candidates by Euclidean distance to the query.
pub fn rank_candidates<C: Candidate>(
    candidates: Vec<C>,
    query: &RelationInstance,
    backend: &Backend,
    model: &str,
    block_tokens: impl Fn(&C) -> usize,
) -> Result<Vec<ScoredCandidate<C>>, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    let query_vec = backend.embed(&reconstruct_text(query), model)?;
    let texts: Vec<String> = candidates.iter().map(|c| reconstruct_text(c.instance())).collect();
    let vectors = backend
        .embed_many(&texts, model)
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let mut scored = candidates
        .into_iter()
        .zip(vectors)
        .map(|(candidate, v)| {
            Ok(ScoredCandidate {
                distance: euclidean_distance(&v.values, &query_vec.values)?,
                est_tokens: block_tokens(&candidate),
                candidate,
            })
        })
        .collect::<Result<Vec<_>, RetrievalError>>()?;
    sort_scored(&mut scored);
    Ok(scored)
}

/// Longest prefix of `ranked` whose tokens plus `overhead` fit in `budget`,
/// then cut to `m_cap`. Never skips a nearer candidate for a farther one.
pub fn pack_demonstrations<C>(
    mut ranked: Vec<ScoredCandidate<C>>,
    overhead: usize,
    budget: usize,
    m_cap: Option<usize>,
) -> Result<Vec<ScoredCandidate<C>>, RetrievalError> {
    if m_cap == Some(0) {
        return Err(RetrievalError::ZeroCap);
    }
    let mut used = overhead;
    let mut take = 0;
    for c in &ranked {
        if used + c.est_tokens > budget {
            break;
        }
        used += c.est_tokens;
        take += 1;
    }
    if let Some(cap) = m_cap {
        take = take.min(cap);
    }
    if take == 0 {
        return Err(RetrievalError::NothingFits {
            budget,
            overhead,
            first: ranked.first().map_or(0, |c| c.est_tokens),
        });
    }
    ranked.truncate(take);
    Ok(ranked)
}
