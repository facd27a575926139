//! Few-shot relation extraction with evidence-reasoning chain-of-thought prompting.
//!
//! The crate is organised around the stages of the pipeline:
//!
//! - [`corpus`] loads FewRel-format data and reconstructs query texts.
//! - [`episodes`] samples reproducible N-way K-shot tasks.
//! - [`backend`] talks to completion/embedding endpoints (live or mock) with a disk cache.
//! - [`reasoning`] holds seed examples and generates 3-step reasoning for support instances.
//! - [`retrieval`] ranks candidates by Euclidean distance and packs them under a token budget.
//! - [`prompting`] renders every prompt family and parses completions into labels.
//! - [`baselines`] implements nearest-centroid prototype classification.
//! - [`evaluation`] scores records and aggregates across seeds.
//! - [`pipeline`] wires everything into a replayable run.

pub mod backend;
pub mod baselines;
pub mod config;
pub mod corpus;
pub mod digest;
pub mod episodes;
pub mod evaluation;
pub mod pipeline;
pub mod prompting;
pub mod reasoning;
pub mod retrieval;

pub use backend::{Backend, BackendError, BackendStats, CompletionRequest, EmbeddingVector};
pub use corpus::{Catalog, CorpusError, EntityMention, InstanceUid, RelationInstance, RelationLabel};
pub use episodes::{Episode, EpisodeError, TaskPlan};
pub use evaluation::{EvalRecord, RunReport};
pub use prompting::{Prediction, PredictionMethod, PromptKind, RenderedPrompt};
pub use reasoning::{ReasonedInstance, SeedExample, SeedSet};
