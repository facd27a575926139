//! Nearest-centroid ("prototype") classification over backend embeddings.

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, EmbeddingVector};
use crate::corpus::{reconstruct_text, RelationInstance};
use crate::episodes::Episode;
use crate::retrieval::{euclidean_distance, RetrievalError};

/// Which text of an instance gets embedded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// The detokenized sentence.
    Raw,
    /// The context/question form used for retrieval.
    #[default]
    Reconstructed,
}

pub fn embedding_text(instance: &RelationInstance, mode: TextMode) -> String {
    match mode {
        TextMode::Raw => instance.text(),
        TextMode::Reconstructed => reconstruct_text(instance),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub label_id: String,
    pub centroid: EmbeddingVector,
    pub k: usize,
}

/// Component-wise mean of equal-length vectors.
pub fn centroid(vectors: &[Vec<f64>]) -> Result<Vec<f64>, RetrievalError> {
    let first = vectors.first().ok_or(RetrievalError::NoCandidates)?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != sum.len() {
            return Err(RetrievalError::DimensionMismatch(sum.len(), v.len()));
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let k = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / k).collect())
}

/// One prototype per episode label, in label-id order.
pub fn build_prototypes(
    episode: &Episode,
    backend: &Backend,
    model: &str,
    mode: TextMode,
) -> Result<Vec<Prototype>, RetrievalError> {
    episode
        .support
        .iter()
        .map(|(label, instances)| {
            let texts: Vec<String> = instances.iter().map(|i| embedding_text(i, mode)).collect();
            let vectors = backend
                .embed_many(&texts, model)
                .into_iter()
                .map(|r| r.map(|v| v.values))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Prototype {
                label_id: label.clone(),
                centroid: EmbeddingVector::new(centroid(&vectors)?, model)?,
                k: vectors.len(),
            })
        })
        .collect()
}

/// Label of the nearest prototype; equal distances go to the smaller label id.
pub fn classify_vector(prototypes: &[Prototype], query: &[f64]) -> Result<String, RetrievalError> {
    let mut best: Option<(f64, &str)> = None;
    for p in prototypes {
        let d = euclidean_distance(&p.centroid.values, query)?;
        let better = match best {
            None => true,
            Some((bd, bl)) => d < bd || (d == bd && p.label_id.as_str() < bl),
        };
        if better {
            best = Some((d, &p.label_id));
        }
    }
    best.map(|(_, l)| l.to_string()).ok_or(RetrievalError::NoCandidates)
}

pub fn prototype_classify(
    prototypes: &[Prototype],
    query: &RelationInstance,
    backend: &Backend,
    model: &str,
    mode: TextMode,
) -> Result<String, RetrievalError> {
    let v = backend.embed(&embedding_text(query, mode), model)?;
    classify_vector(prototypes, &v.values)
}
