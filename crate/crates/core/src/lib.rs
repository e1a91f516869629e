//! Multi-vector retrieval and iterative multimodal reasoning over a page corpus.
//!
//! Stage 1 scores pages against query tokens with a two-way late-interaction
//! score, accelerated by a per-page centroid index. Stage 2 narrows the list
//! with a sharded LLM filter. A reasoner loop then answers questions over the
//! surviving pages, refining its query between rounds.

pub mod bench;
pub mod coarse;
pub mod config;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gateway;
pub mod ingest;
pub mod kmeans;
pub mod pipeline;
pub mod projection;
pub mod reasoner;
pub mod scoring;
pub mod store;
pub mod types;

pub use config::PipelineConfig;
pub use error::{Error, Result};
pub use types::{Matrix, MatrixView, PageRecord, QueryTokens, Question, RankedPage};
