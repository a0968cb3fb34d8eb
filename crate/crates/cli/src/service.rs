//! Stateless HTTP reranker: predict, judge, threshold and order, without the
//! final answer.
//!
//! `POST /v1/filter`
//!
//! ```json
//! {"question": "...", "documents": [{"doc_id": "d1", "text": "..."}],
//!  "n": 0.5, "order_mode": "descending", "include_answers": true}
//! ```
//!
//! `order_mode` is `descending` (default), `ascending` or `random`; random
//! needs an integer `seed`. `query_id` is optional and only tags backend
//! requests. Document order in the request is the retrieval rank.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ragjudge_core::backend::LlmBackend;
use ragjudge_core::filter::{apply_filter, OrderKind, ScoredDocument};
use ragjudge_core::pipeline::Pipeline;
use ragjudge_core::{FilterOutcome, PipelineConfig, Query, RetrievedDocument};

/// Request bodies above this size are refused with 413.
pub const MAX_BODY_BYTES: usize = 4 * 1024 * 1024;
const DEFAULT_QUERY_ID: &str = "api";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiDocument {
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterApiRequest {
    pub question: String,
    pub documents: Vec<ApiDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_mode: Option<OrderKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub include_answers: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptDocument {
    pub doc_id: String,
    pub score: f64,
    /// 1-based position in the presentation order.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedDocument {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentAnswer {
    pub doc_id: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterApiResponse {
    pub tau: f64,
    pub sigma: f64,
    pub n: f64,
    pub threshold: f64,
    pub kept: Vec<KeptDocument>,
    pub dropped: Vec<DroppedDocument>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<DocumentAnswer>>,
}

impl FilterApiResponse {
    fn from_outcome(o: &FilterOutcome, answers: Option<Vec<DocumentAnswer>>) -> Self {
        Self {
            tau: o.tau,
            sigma: o.sigma,
            n: o.n,
            threshold: o.threshold(),
            kept: o
                .kept
                .iter()
                .enumerate()
                .map(|(i, k)| KeptDocument { doc_id: k.doc_id.clone(), score: k.score, rank: i + 1 })
                .collect(),
            dropped: o.dropped.iter().map(|d| DroppedDocument { doc_id: d.doc_id.clone(), score: d.score }).collect(),
            answers,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    pub fn status(&self) -> StatusCode {
        self.status
    }
}

impl std::fmt::Display for ApiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({})", self.message, self.status)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message}))).into_response()
    }
}

struct ServiceState {
    pipeline: Pipeline,
    timeout: Duration,
}

/// Builds the service router.
pub fn router(cfg: PipelineConfig, backend: Arc<dyn LlmBackend>, request_timeout: Duration) -> Router {
    let state = Arc::new(ServiceState { pipeline: Pipeline::new(cfg, backend), timeout: request_timeout });
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/filter", post(filter))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

async fn healthz(State(state): State<Arc<ServiceState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "backend": state.pipeline.backend().name(),
    }))
}

/// Checks a request and turns it into pipeline inputs.
pub fn validate_request(
    req: &FilterApiRequest,
    cfg: &PipelineConfig,
) -> Result<(Query, Vec<RetrievedDocument>, f64, ragjudge_core::OrderMode), ApiError> {
    let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m);
    if req.question.trim().is_empty() {
        return Err(bad("question: must be non-empty".into()));
    }
    if req.documents.is_empty() {
        return Err(bad("documents: must contain at least one document".into()));
    }
    if req.documents.len() > cfg.max_docs {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("documents: {} documents exceeds the limit of {}", req.documents.len(), cfg.max_docs),
        ));
    }
    let mut seen = HashSet::new();
    for (i, d) in req.documents.iter().enumerate() {
        if d.doc_id.is_empty() {
            return Err(bad(format!("documents[{i}].doc_id: must be non-empty")));
        }
        if d.text.trim().is_empty() {
            return Err(bad(format!("documents[{i}].text: must be non-empty")));
        }
        if !seen.insert(d.doc_id.as_str()) {
            return Err(bad(format!("documents[{i}].doc_id: duplicate id {:?}", d.doc_id)));
        }
    }
    let n = req.n.unwrap_or(cfg.n);
    if !(n.is_finite() && n >= 0.0) {
        return Err(bad(format!("n: must be finite and >= 0, got {n}")));
    }
    let mode = match req.order_mode {
        None => cfg.order_mode,
        Some(kind) => kind.with_seed(req.seed).map_err(|_| bad("seed: required when order_mode is random".into()))?,
    };
    let query_id = req.query_id.clone().unwrap_or_else(|| DEFAULT_QUERY_ID.to_string());
    let docs = req
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| RetrievedDocument::new(d.doc_id.clone(), d.text.clone(), i as u32 + 1))
        .collect();
    Ok((Query::open(query_id, req.question.clone(), &[]), docs, n, mode))
}

async fn filter(
    State(state): State<Arc<ServiceState>>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<FilterApiResponse>, ApiError> {
    let body = body.map_err(|r| ApiError::new(r.status(), r.body_text()))?;
    let req: FilterApiRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))?;
    let (query, docs, n, mode) = validate_request(&req, state.pipeline.config())?;
    let work = async {
        let scored = state.pipeline.score_query(&query, &docs).await.map_err(|e| {
            tracing::warn!(query_id = %query.id, stage = ?e.stage, "filter request failed: {}", e.message);
            ApiError::new(StatusCode::BAD_GATEWAY, format!("backend failure during {:?} stage", e.stage).to_lowercase())
        })?;
        let inputs: Vec<ScoredDocument> =
            scored.documents.iter().zip(&scored.verdicts).map(|(d, v)| ScoredDocument::from_verdict(d, v)).collect();
        let outcome = apply_filter(&inputs, n, mode)
            .map_err(|e| ApiError::new(StatusCode::BAD_GATEWAY, format!("judge scores unusable: {e}")))?;
        let answers = req.include_answers.unwrap_or(false).then(|| {
            scored
                .triplets
                .iter()
                .map(|t| DocumentAnswer { doc_id: t.doc_id.clone(), answer: t.predicted_answer.clone() })
                .collect()
        });
        Ok(FilterApiResponse::from_outcome(&outcome, answers))
    };
    match tokio::time::timeout(state.timeout, work).await {
        Ok(r) => r.map(Json),
        Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "request timed out waiting for the backend")),
    }
}
