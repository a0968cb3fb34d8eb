//! Per-query orchestration of the three agents and resumable dataset runs.
//!
//! Results files are JSON Lines. Each line is one of
//!
//! * `{"kind": "result", "schema_version": 1, "query_id", "final_answer",
//!   "filter_outcome" (null for document-free queries), "triplets": [{doc_id,
//!   predicted_answer}], "verdicts": [{doc_id, logprob_yes, logprob_no,
//!   relevance_score, fallback_used}], "backend_call_count", "trimmed_doc_ids"?}`
//! * `{"kind": "error", "schema_version": 1, "query_id", "stage", "message",
//!   "triplets", "verdicts", "backend_call_count"}`
//!
//! Lines appear in dataset order.

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use futures::future::join_all;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::agents::{final_answer, judge_triplet, predict_answer, AgentError};
use crate::backend::LlmBackend;
use crate::config::PipelineConfig;
use crate::eval::{Dataset, DatasetItem};
use crate::filter::{apply_filter, ScoredDocument};
use crate::types::{FilterOutcome, JudgeVerdict, OrderMode, Query, RetrievedDocument, TripletRecord};

pub const RESULT_SCHEMA_VERSION: u32 = 1;

/// Wall-clock time per stage. Logged, never serialized.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub score: Duration,
    pub filter: Duration,
    pub final_answer: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub schema_version: u32,
    pub query_id: String,
    pub final_answer: String,
    pub filter_outcome: Option<FilterOutcome>,
    pub triplets: Vec<TripletRecord>,
    pub verdicts: Vec<JudgeVerdict>,
    pub backend_call_count: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trimmed_doc_ids: Vec<String>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl PipelineResult {
    pub fn kept_count(&self) -> usize {
        self.filter_outcome.as_ref().map_or(0, |o| o.kept.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Predict,
    Judge,
    Filter,
    Final,
}

/// A failed query with whatever trace was gathered before the failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Error)]
#[error("query {query_id} failed at {stage:?}: {message}")]
pub struct QueryFailure {
    pub schema_version: u32,
    pub query_id: String,
    pub stage: Stage,
    pub message: String,
    pub triplets: Vec<TripletRecord>,
    pub verdicts: Vec<JudgeVerdict>,
    pub backend_call_count: u32,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunRecord {
    Result(PipelineResult),
    Error(QueryFailure),
}

impl RunRecord {
    pub fn query_id(&self) -> &str {
        match self {
            RunRecord::Result(r) => &r.query_id,
            RunRecord::Error(e) => &e.query_id,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("run record serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: unreadable record: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub total: usize,
    pub results: usize,
    pub errors: usize,
    /// Queries found already complete in the results file.
    pub resumed: usize,
    /// Mean kept-set size over successful queries.
    pub mean_kept_count: f64,
}

impl RunSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RunRecord>, resumed: usize) -> Self {
        let (mut results, mut errors, mut kept) = (0usize, 0usize, 0usize);
        for r in records {
            match r {
                RunRecord::Result(p) => {
                    results += 1;
                    kept += p.kept_count();
                }
                RunRecord::Error(_) => errors += 1,
            }
        }
        Self {
            schema_version: RESULT_SCHEMA_VERSION,
            total: results + errors,
            results,
            errors,
            resumed,
            mean_kept_count: if results == 0 { 0.0 } else { kept as f64 / results as f64 },
        }
    }

    pub fn is_partial(&self) -> bool {
        self.errors > 0
    }
}

/// Output of the scoring stages, reusable across filter settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredQuery {
    pub query_id: String,
    /// Documents after trimming, in rank order; aligned with `verdicts`.
    pub documents: Vec<RetrievedDocument>,
    pub triplets: Vec<TripletRecord>,
    pub verdicts: Vec<JudgeVerdict>,
    pub trimmed_doc_ids: Vec<String>,
    pub backend_call_count: u32,
    pub elapsed: Duration,
}

impl ScoredQuery {
    fn failure(&self, stage: Stage, message: String) -> QueryFailure {
        QueryFailure {
            schema_version: RESULT_SCHEMA_VERSION,
            query_id: self.query_id.clone(),
            stage,
            message,
            triplets: self.triplets.clone(),
            verdicts: self.verdicts.clone(),
            backend_call_count: self.backend_call_count,
        }
    }
}

/// Runs queries against a backend with a run-wide cap on concurrent calls.
pub struct Pipeline {
    cfg: PipelineConfig,
    backend: Arc<dyn LlmBackend>,
    permits: Arc<Semaphore>,
}

struct Counter(AtomicU32);

impl Counter {
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }
    fn get(&self) -> u32 {
        self.0.load(Ordering::Relaxed)
    }
}

/// Keeps the `max_docs` best-ranked documents, returning the kept set in rank
/// order and the ids that were cut.
pub fn trim_documents(docs: &[RetrievedDocument], max_docs: usize) -> (Vec<RetrievedDocument>, Vec<String>) {
    let mut sorted = docs.to_vec();
    sorted.sort_by_key(|d| d.retrieval_rank);
    let cut = sorted.split_off(max_docs.min(sorted.len()));
    (sorted, cut.into_iter().map(|d| d.doc_id).collect())
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, backend: Arc<dyn LlmBackend>) -> Self {
        let permits = Arc::new(Semaphore::new(cfg.parallelism.max(1)));
        Self { cfg, backend, permits }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    async fn permit(&self) -> tokio::sync::SemaphorePermit<'_> {
        self.permits.acquire().await.expect("semaphore is never closed")
    }

    /// Predict then judge one document.
    async fn score_document<'a>(
        &self,
        query: &'a Query,
        doc: &'a RetrievedDocument,
        calls: &Counter,
    ) -> (Option<TripletRecord>, Result<JudgeVerdict, (Stage, AgentError)>) {
        let triplet = {
            let _p = self.permit().await;
            calls.bump();
            predict_answer(&*self.backend, &self.cfg, query, doc).await
        };
        let triplet = match triplet {
            Ok(t) => t,
            Err(e) => return (None, Err((Stage::Predict, e))),
        };
        let verdict = {
            let _p = self.permit().await;
            calls.bump();
            judge_triplet(&*self.backend, &triplet, &self.cfg).await
        };
        (Some(triplet.record()), verdict.map_err(|e| (Stage::Judge, e)))
    }

    /// Stages 1 and 2: predict and judge every document, concurrently.
    pub async fn score_query(&self, query: &Query, docs: &[RetrievedDocument]) -> Result<ScoredQuery, QueryFailure> {
        let (docs, trimmed) = trim_documents(docs, self.cfg.max_docs);
        if !trimmed.is_empty() {
            tracing::warn!(query_id = %query.id, trimmed = trimmed.len(), "more than max_docs documents; keeping the best-ranked");
        }
        let calls = Counter(AtomicU32::new(0));
        let started = Instant::now();
        let scored = join_all(docs.iter().map(|d| self.score_document(query, d, &calls))).await;
        let mut triplets = Vec::with_capacity(docs.len());
        let mut verdicts = Vec::with_capacity(docs.len());
        let mut first_error = None;
        for (triplet, verdict) in scored {
            triplets.extend(triplet);
            match verdict {
                Ok(v) => verdicts.push(v),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        let scored = ScoredQuery {
            query_id: query.id.clone(),
            documents: docs,
            triplets,
            verdicts,
            trimmed_doc_ids: trimmed,
            backend_call_count: calls.get(),
            elapsed: started.elapsed(),
        };
        match first_error {
            Some((stage, e)) => Err(scored.failure(stage, e.to_string())),
            None => Ok(scored),
        }
    }

    /// Stages 3 and 4: filter with `n`, order with `mode`, then ask Agent-3.
    pub async fn finish_query(
        &self,
        query: &Query,
        scored: &ScoredQuery,
        n: f64,
        mode: OrderMode,
    ) -> Result<PipelineResult, QueryFailure> {
        let mut timings = StageTimings { score: scored.elapsed, ..StageTimings::default() };
        let t = Instant::now();
        let outcome = if scored.documents.is_empty() {
            None
        } else {
            let docs: Vec<ScoredDocument> =
                scored.documents.iter().zip(&scored.verdicts).map(|(d, v)| ScoredDocument::from_verdict(d, v)).collect();
            match apply_filter(&docs, n, mode) {
                Ok(o) => Some(o),
                Err(e) => return Err(scored.failure(Stage::Filter, e.to_string())),
            }
        };
        timings.filter = t.elapsed();

        let by_id: HashMap<&str, &RetrievedDocument> = scored.documents.iter().map(|d| (d.doc_id.as_str(), d)).collect();
        let ordered: Vec<&RetrievedDocument> =
            outcome.iter().flat_map(|o| o.kept.iter().map(|k| by_id[k.doc_id.as_str()])).collect();
        let t = Instant::now();
        let answer = {
            let _p = self.permit().await;
            final_answer(&*self.backend, &self.cfg, query, &ordered).await
        };
        timings.final_answer = t.elapsed();
        let calls = scored.backend_call_count + 1;
        let answer = match answer {
            Ok(a) => a,
            Err(e) => {
                let mut f = scored.failure(Stage::Final, e.to_string());
                f.backend_call_count = calls;
                return Err(f);
            }
        };
        tracing::debug!(
            query_id = %query.id,
            docs = scored.documents.len(),
            kept = ordered.len(),
            score_ms = timings.score.as_millis() as u64,
            final_ms = timings.final_answer.as_millis() as u64,
            "query done"
        );
        Ok(PipelineResult {
            schema_version: RESULT_SCHEMA_VERSION,
            query_id: query.id.clone(),
            final_answer: answer,
            filter_outcome: outcome,
            triplets: scored.triplets.clone(),
            verdicts: scored.verdicts.clone(),
            backend_call_count: calls,
            trimmed_doc_ids: scored.trimmed_doc_ids.clone(),
            timings,
        })
    }

    /// Runs the full flow for one query with the configured `n` and order.
    pub async fn run_query(&self, query: &Query, docs: &[RetrievedDocument]) -> Result<PipelineResult, QueryFailure> {
        let scored = self.score_query(query, docs).await?;
        self.finish_query(query, &scored, self.cfg.n, self.cfg.order_mode).await
    }

    async fn run_item(&self, item: &DatasetItem) -> RunRecord {
        match self.run_query(&item.query, &item.documents).await {
            Ok(r) => RunRecord::Result(r),
            Err(e) => {
                tracing::warn!(query_id = %e.query_id, stage = ?e.stage, "query failed: {}", e.message);
                RunRecord::Error(e)
            }
        }
    }

    /// Runs every query not already recorded in `output`, appending one line
    /// per query in dataset order.
    pub async fn run_dataset(&self, dataset: &Dataset, output: &Path) -> Result<RunSummary, RunError> {
        let io = |source| RunError::Io { path: output.to_path_buf(), source };
        let existing = recover_results(output)?;
        let done: BTreeSet<&str> = existing.iter().map(RunRecord::query_id).collect();
        let known: BTreeSet<&str> = dataset.items.iter().map(|i| i.query.id.as_str()).collect();
        if let Some(stray) = done.iter().find(|id| !known.contains(*id)) {
            tracing::warn!(query_id = %stray, "results file holds a query that is not in the dataset");
        }
        let pending: Vec<&DatasetItem> = dataset.items.iter().filter(|i| !done.contains(i.query.id.as_str())).collect();
        let resumed = dataset.items.len() - pending.len();
        if resumed > 0 {
            tracing::info!(resumed, pending = pending.len(), "resuming run");
        }

        let mut file = OpenOptions::new().create(true).append(true).open(output).map_err(io)?;
        let mut fresh = Vec::with_capacity(pending.len());
        let mut stream = futures::stream::iter(pending).map(|item| self.run_item(item)).buffered(self.cfg.parallelism.max(1));
        while let Some(record) = stream.next().await {
            file.write_all(record.to_line().as_bytes()).map_err(io)?;
            file.flush().map_err(io)?;
            fresh.push(record);
        }
        Ok(RunSummary::from_records(existing.iter().chain(&fresh), resumed))
    }
}

/// Convenience wrapper: one query with a fresh pipeline.
pub async fn run_query(
    cfg: &PipelineConfig,
    query: &Query,
    docs: &[RetrievedDocument],
    backend: Arc<dyn LlmBackend>,
) -> Result<PipelineResult, QueryFailure> {
    Pipeline::new(cfg.clone(), backend).run_query(query, docs).await
}

/// Reads a results file.
pub fn read_results(path: &Path) -> Result<Vec<RunRecord>, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::Io { path: path.to_path_buf(), source })?;
    parse_records(path, &text).map(|(records, _)| records)
}

/// Parses complete lines. Returns the records and the byte length of the
/// well-formed prefix; only the final line may be torn.
fn parse_records(path: &Path, text: &str) -> Result<(Vec<RunRecord>, usize), RunError> {
    let mut records = Vec::new();
    let mut offset = 0;
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let last = i + 1 == lines.len();
        let complete = line.ends_with('\n');
        match serde_json::from_str::<RunRecord>(line.trim_end()) {
            Ok(r) if complete => records.push(r),
            _ if last => break,
            Ok(_) => unreachable!("only the last piece can lack a newline"),
            Err(e) => {
                return Err(RunError::Corrupt { path: path.to_path_buf(), line: i + 1, message: e.to_string() });
            }
        }
        offset += line.len();
    }
    Ok((records, offset))
}

/// Loads an existing results file for resumption, cutting off a torn final
/// line left by an interrupted writer.
fn recover_results(path: &Path) -> Result<Vec<RunRecord>, RunError> {
    let io = |source| RunError::Io { path: path.to_path_buf(), source };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io(e)),
    };
    let (records, good) = parse_records(path, &text)?;
    if good < text.len() {
        tracing::warn!(path = %path.display(), bytes = text.len() - good, "dropping torn trailing record");
        File::options().write(true).open(path).and_then(|f| f.set_len(good as u64)).map_err(io)?;
    }
    Ok(records)
}
