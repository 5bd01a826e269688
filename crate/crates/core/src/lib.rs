//! Knowledge-grounded response selection.
//!
//! A message is grounded in a commonsense knowledge base by n-gram concept
//! matching ([`knowledge_index`]); candidate responses are then ranked by one
//! of six scorers ([`scoring_models`]): TF-IDF, bag-of-words embeddings (with
//! and without max-pooled knowledge), a one-hop memory network, a dual LSTM
//! encoder and a tri LSTM encoder that adds the best-matching assertion's
//! score to the dual encoder logit.
//!
//! Everything trainable is built on the small reverse-mode engine in
//! [`numeric`], which also carries the finite-difference gradient checker.

pub mod checkpoint;
pub mod error;
pub mod knowledge_index;
pub mod numeric;
pub mod scoring_models;
pub mod text_pipeline;
pub mod train_eval;

pub use error::{Error, Result};
pub use knowledge_index::{Assertion, KnowledgeIndex, RetrievedSet};
pub use numeric::{Array, ParameterStore};
pub use scoring_models::{Model, ModelConfig, ModelKind, ScoredCandidate};
pub use text_pipeline::{TokenSequence, Vocabulary};
