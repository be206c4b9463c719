//! Retrieval-augmented in-context learning for multimodal disease classification.
//!
//! The pipeline runs per query sample:
//!
//! 1. [`retriever`] finds the `k` most similar labeled exemplars in an
//!    [`embedstore`] (leave-one-out over the dataset).
//! 2. [`promptkit`] turns them into a simulated multi-round chat, one fake
//!    user/assistant round per exemplar, followed by the real query.
//! 3. [`modelgw`] sends the transcript to an OpenAI-compatible endpoint (or a
//!    deterministic mock).
//! 4. [`labelmap`] maps the raw reply onto a canonical label.
//! 5. [`evalkit`] scores the run with accuracy and micro/macro P/R/F1.
//!
//! [`runner`] wires these together with resumable output and a bounded
//! worker pool. Vector math is generic over the float type; the aliases below
//! fix the concrete types the runner uses.

pub mod corpus;
pub mod embedstore;
pub mod evalkit;
pub mod labelmap;
pub mod modelgw;
pub mod num;
pub mod promptkit;
pub mod retriever;
pub mod runner;

pub use corpus::{DatasetManifest, LabelSet, Sample};
pub use labelmap::ParsedLabel;
pub use num::{MetricValue, Scalar};
pub use promptkit::{ChatTranscript, PromptTemplate};
pub use retriever::SimilarityMetric;

/// Embedding store in double precision, as used by the runner.
pub type Store = embedstore::EmbeddingStore<f64>;
/// Single-precision embedding store.
pub type Store32 = embedstore::EmbeddingStore<f32>;
pub type Neighbor = retriever::Neighbor<f64>;
pub type Retrieval = retriever::Retrieval<f64>;
/// Floating-point evaluation report.
pub type EvalReport = evalkit::EvalReport<f64>;
/// Evaluation report in exact rational arithmetic.
pub type ExactEvalReport = evalkit::EvalReport<num_rational::Rational64>;
