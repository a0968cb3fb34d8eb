//! Text generation and first-token log-probability extraction.
//!
//! Every agent talks to an [`LlmBackend`]. Two implementations ship here: an
//! OpenAI-compatible HTTP client ([`HttpBackend`]) and a scripted, fully
//! deterministic mock ([`MockBackend`]) used by tests and offline runs.

mod http;
mod mock;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{ApiShape, HttpBackend, HttpBackendConfig};
pub use mock::{MockBackend, MockEntry, MockFailure, MockScript, MOCK_SCHEMA_VERSION};

/// Which agent issued a request. Carried on every request so scripted
/// backends can key their responses and logs can attribute calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Predictor,
    Judge,
    Final,
}

impl AgentRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            AgentRole::Predictor => "predictor",
            AgentRole::Judge => "judge",
            AgentRole::Final => "final",
        }
    }
}

/// Routing metadata for a request; never sent over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestTag {
    pub role: AgentRole,
    pub query_id: String,
    /// The single document for predictor/judge calls, the ordered list for final calls.
    pub doc_ids: Vec<String>,
}

impl RequestTag {
    /// `role|query_id|doc1,doc2,...`, the mock script key format.
    pub fn key(&self) -> String {
        format!("{}|{}|{}", self.role.as_str(), self.query_id, self.doc_ids.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub system_instruction: String,
    pub user_prompt: String,
    pub max_tokens: u32,
    /// Number of alternatives to report for the first generated position; 0 disables.
    pub want_top_logprobs: u32,
    pub tag: RequestTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

impl TokenLogprob {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self { token: token.into(), logprob }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_top_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub raw_metadata: serde_json::Value,
}

impl GenerationResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            first_token_top_logprobs: None,
            raw_metadata: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("backend returned no token log-probabilities: {0}")]
    LogprobsUnsupported(String),
    #[error("mock script has no entry for key {0:?}")]
    ScriptMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[async_trait]
pub trait LlmBackend: Send + Sync {
    /// Greedy completion. When `want_top_logprobs > 0` the first generated
    /// position's alternatives are returned as well.
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    /// Largest `want_top_logprobs` this backend accepts.
    fn max_top_logprobs(&self) -> u32 {
        20
    }

    fn name(&self) -> &str;
}

#[async_trait]
impl<B: LlmBackend + ?Sized> LlmBackend for Arc<B> {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(req).await
    }

    fn max_top_logprobs(&self) -> u32 {
        (**self).max_top_logprobs()
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Wraps a backend and keeps every request it sees, in call order.
pub struct RecordingBackend<B> {
    inner: B,
    calls: AtomicUsize,
    log: Mutex<Vec<GenerationRequest>>,
}

impl<B: LlmBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, calls: AtomicUsize::new(0), log: Mutex::new(Vec::new()) }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.log.lock().expect("recording log poisoned").clone()
    }
}

#[async_trait]
impl<B: LlmBackend> LlmBackend for RecordingBackend<B> {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("recording log poisoned").push(req.clone());
        self.inner.generate(req).await
    }

    fn max_top_logprobs(&self) -> u32 {
        self.inner.max_top_logprobs()
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

/// Aggregated Yes/No mass of a first-token distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct YesNoLogprobs {
    pub yes: f64,
    pub no: f64,
    pub fallback_yes: bool,
    pub fallback_no: bool,
}

/// Default surface forms counted as "Yes".
pub fn default_yes_variants() -> Vec<String> {
    ["Yes", " Yes", "yes", " yes"].map(String::from).to_vec()
}

/// Default surface forms counted as "No".
pub fn default_no_variants() -> Vec<String> {
    ["No", " No", "no", " no"].map(String::from).to_vec()
}

/// Natural-log mass of the listed variants found in the top-token list,
/// combined with log-sum-exp. Returns `None` when no variant is present.
///
/// Duplicated tokens count once, at their highest log-probability. The
/// matched values are summed largest-first so the result does not depend on
/// the order of `top`.
pub fn variant_logprob(top: &[TokenLogprob], variants: &[String]) -> Option<f64> {
    let mut matched: Vec<(&str, f64)> = Vec::new();
    for t in top {
        if !variants.iter().any(|v| v == &t.token) {
            continue;
        }
        match matched.iter_mut().find(|(tok, _)| *tok == t.token) {
            Some(entry) => entry.1 = entry.1.max(t.logprob),
            None => matched.push((t.token.as_str(), t.logprob)),
        }
    }
    let mut values: Vec<f64> = matched.into_iter().map(|(_, lp)| lp).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    let (&max, rest) = values.split_first()?;
    let tail: f64 = rest.iter().map(|lp| (lp - max).exp()).sum();
    Some(max + tail.ln_1p())
}

/// Reads the Yes and No log-probabilities off a judge response.
///
/// A side with no variant in the list gets `floor` and its fallback flag set.
pub fn extract_yes_no_logprobs(
    resp: &GenerationResponse,
    yes_variants: &[String],
    no_variants: &[String],
    floor: f64,
) -> Result<YesNoLogprobs, BackendError> {
    let top = resp.first_token_top_logprobs.as_deref().ok_or_else(|| {
        BackendError::LogprobsUnsupported("response carries no first-token top_logprobs".into())
    })?;
    let yes = variant_logprob(top, yes_variants);
    let no = variant_logprob(top, no_variants);
    Ok(YesNoLogprobs {
        yes: yes.unwrap_or(floor),
        no: no.unwrap_or(floor),
        fallback_yes: yes.is_none(),
        fallback_no: no.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn resp(top: &[(&str, f64)]) -> GenerationResponse {
        GenerationResponse {
            text: String::new(),
            first_token_top_logprobs: Some(top.iter().map(|(t, l)| TokenLogprob::new(*t, *l)).collect()),
            raw_metadata: serde_json::Value::Null,
        }
    }

    fn set(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn direct_lookup() {
        let r = resp(&[("Yes", -0.05), ("No", -3.10)]);
        let out = extract_yes_no_logprobs(&r, &set(&["Yes"]), &set(&["No"]), -100.0).unwrap();
        assert_eq!((out.yes, out.no, out.fallback_yes, out.fallback_no), (-0.05, -3.10, false, false));
    }

    #[test]
    fn variants_combine_by_log_sum_exp() {
        let r = resp(&[("Yes", 0.5f64.ln()), (" Yes", 0.25f64.ln()), ("No", 0.125f64.ln())]);
        let out = extract_yes_no_logprobs(&r, &default_yes_variants(), &default_no_variants(), -100.0).unwrap();
        assert!(((out.yes - 0.75f64.ln()) / 0.75f64.ln()).abs() < 1e-12);
        assert!(((out.no - 0.125f64.ln()) / 0.125f64.ln()).abs() < 1e-12);
        assert!((out.yes - -0.2877).abs() < 1e-4 && (out.no - -2.0794).abs() < 1e-4);
    }

    #[test]
    fn missing_side_uses_floor() {
        let r = resp(&[("Yes", -0.02)]);
        let out = extract_yes_no_logprobs(&r, &default_yes_variants(), &default_no_variants(), -100.0).unwrap();
        assert_eq!((out.yes, out.no), (-0.02, -100.0));
        assert!(!out.fallback_yes && out.fallback_no);
    }

    #[test]
    fn absent_logprobs_is_an_error() {
        let r = GenerationResponse::text("Yes");
        let err = extract_yes_no_logprobs(&r, &default_yes_variants(), &default_no_variants(), -100.0);
        assert!(matches!(err, Err(BackendError::LogprobsUnsupported(_))));
    }

    #[test]
    fn duplicate_tokens_count_once() {
        let top = vec![TokenLogprob::new("Yes", -1.0), TokenLogprob::new("Yes", -0.5)];
        assert_eq!(variant_logprob(&top, &set(&["Yes"])), Some(-0.5));
    }

    #[test]
    fn tag_key_format() {
        let tag = RequestTag { role: AgentRole::Final, query_id: "q1".into(), doc_ids: vec!["d3".into(), "d1".into()] };
        assert_eq!(tag.key(), "final|q1|d3,d1");
    }

    fn top_list() -> impl Strategy<Value = Vec<(String, f64)>> {
        let tokens = prop::sample::select(vec!["Yes", " Yes", "yes", "No", " No", "no", "Maybe", "The"]);
        prop::collection::vec((tokens.prop_map(String::from), -30.0f64..0.0), 0..8)
    }

    proptest! {
        #[test]
        fn permutation_invariant(list in top_list(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let base: Vec<TokenLogprob> = list.iter().map(|(t, l)| TokenLogprob::new(t.clone(), *l)).collect();
            let mut shuffled = base.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let y = default_yes_variants();
            prop_assert_eq!(variant_logprob(&base, &y), variant_logprob(&shuffled, &y));
        }

        #[test]
        fn absent_variant_changes_nothing(list in top_list()) {
            let base: Vec<TokenLogprob> = list.iter().map(|(t, l)| TokenLogprob::new(t.clone(), *l)).collect();
            let mut extended = default_yes_variants();
            extended.push("YES!".into());
            prop_assert_eq!(variant_logprob(&base, &default_yes_variants()), variant_logprob(&base, &extended));
        }

        #[test]
        fn lse_dominates_max(list in top_list()) {
            let base: Vec<TokenLogprob> = list.iter().map(|(t, l)| TokenLogprob::new(t.clone(), *l)).collect();
            let y = default_yes_variants();
            let mut best: std::collections::BTreeMap<&str, f64> = Default::default();
            for t in &base {
                if y.contains(&t.token) {
                    let e = best.entry(t.token.as_str()).or_insert(f64::NEG_INFINITY);
                    *e = e.max(t.logprob);
                }
            }
            match variant_logprob(&base, &y) {
                None => prop_assert!(best.is_empty()),
                Some(v) => {
                    let max = best.values().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= max);
                    if best.len() == 1 { prop_assert_eq!(v, max); } else { prop_assert!(v > max); }
                }
            }
        }
    }
}
