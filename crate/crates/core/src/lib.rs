//! Multi-agent document filtering for retrieval-augmented generation.
//!
//! For each query a predictor agent answers from every retrieved document in
//! isolation, a judge agent scores each (document, question, answer) triplet
//! by the log-probability gap between a "Yes" and a "No" first token, and the
//! documents scoring at least the query's mean score (optionally relaxed by
//! `n` standard deviations) are passed, best first, to a final-predictor agent.
//!
//! - [`backend`]: the LLM contract, an OpenAI-compatible client and a scripted mock
//! - [`agents`]: prompt templates and the three agent calls
//! - [`filter`]: statistics, thresholding, ordering, optimal judge bars
//! - [`pipeline`]: per-query orchestration and resumable dataset runs
//! - [`eval`]: dataset ingestion and QA metrics
//! - [`experiments`]: ordering, ablation and score-distribution studies

pub mod agents;
pub mod backend;
pub mod config;
pub mod eval;
pub mod experiments;
pub mod filter;
pub mod fixtures;
pub mod pipeline;
pub mod text;
pub mod types;

pub use config::{AppConfig, PipelineConfig};
pub use text::normalize_text;
pub use types::*;
