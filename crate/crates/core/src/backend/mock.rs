//! Scripted backend keyed on `(role, query_id, doc ids)`.
//!
//! Script file layout (`schema_version` 1):
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "responses": {
//!     "judge|q1|d1": { "text": "Yes", "top_logprobs": [{"token": "Yes", "logprob": -0.05}] },
//!     "final|q1|d3,d1": { "text": "Maniowy" },
//!     "final|q1|gold,*": { "text": "right" },
//!     "predictor|*|d1": { "text": "" },
//!     "final|q2|*": { "error": { "kind": "unavailable", "message": "scripted outage" } }
//!   }
//! }
//! ```
//!
//! The query segment may be `*`. The doc segment may be `*`, or a
//! comma-separated prefix ending in `,*` which matches any ordered list
//! starting with those ids. An exact key always wins; otherwise an exact query
//! beats `*`, an exact doc list beats a prefix, and a longer prefix beats a
//! shorter one. A request that matches nothing is a [`BackendError::ScriptMiss`].

use std::collections::BTreeMap;
use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendError, GenerationRequest, GenerationResponse, LlmBackend, TokenLogprob};

pub const MOCK_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum MockFailure {
    Unavailable(String),
    Protocol(String),
    LogprobsUnsupported(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<MockFailure>,
}

impl MockEntry {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), ..Self::default() }
    }

    pub fn judge(logprob_yes: f64, logprob_no: f64) -> Self {
        let mut top = vec![TokenLogprob::new("Yes", logprob_yes), TokenLogprob::new("No", logprob_no)];
        top.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        let text = top[0].token.clone();
        Self { text, top_logprobs: Some(top), error: None }
    }

    /// A judge response whose relevance score is exactly `score`.
    pub fn judge_score(score: f64) -> Self {
        if score >= 0.0 {
            Self::judge(0.0, -score)
        } else {
            Self::judge(score, 0.0)
        }
    }

    pub fn failure(f: MockFailure) -> Self {
        Self { error: Some(f), ..Self::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub schema_version: u32,
    pub responses: BTreeMap<String, MockEntry>,
}

impl MockScript {
    pub fn new() -> Self {
        Self { schema_version: MOCK_SCHEMA_VERSION, responses: BTreeMap::new() }
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: MockEntry) -> &mut Self {
        self.responses.insert(key.into(), entry);
        self
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let script: MockScript = serde_json::from_str(s).map_err(|e| format!("mock script: {e}"))?;
        if script.schema_version != MOCK_SCHEMA_VERSION {
            return Err(format!(
                "mock script schema_version {} unsupported (expected {MOCK_SCHEMA_VERSION})",
                script.schema_version
            ));
        }
        for key in script.responses.keys() {
            Pattern::parse(key)?;
        }
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("mock script serializes")
    }
}

#[derive(Debug, Clone)]
enum DocPattern {
    Exact(Vec<String>),
    Prefix(Vec<String>),
}

#[derive(Debug, Clone)]
struct Pattern {
    role: String,
    query: Option<String>,
    docs: DocPattern,
}

impl Pattern {
    fn parse(key: &str) -> Result<Self, String> {
        let mut parts = key.splitn(3, '|');
        let (Some(role), Some(query), Some(docs)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(format!("mock key {key:?} is not role|query|docs"));
        };
        if !matches!(role, "predictor" | "judge" | "final") {
            return Err(format!("mock key {key:?}: unknown role {role:?}"));
        }
        let query = (query != "*").then(|| query.to_string());
        let ids: Vec<String> = if docs.is_empty() { Vec::new() } else { docs.split(',').map(String::from).collect() };
        let docs = match ids.last().map(String::as_str) {
            Some("*") => DocPattern::Prefix(ids[..ids.len() - 1].to_vec()),
            _ => DocPattern::Exact(ids),
        };
        Ok(Self { role: role.to_string(), query, docs })
    }

    /// Higher is more specific; `None` when the pattern does not apply.
    fn specificity(&self, role: &str, query: &str, docs: &[String]) -> Option<(bool, bool, usize)> {
        if self.role != role {
            return None;
        }
        let query_exact = match &self.query {
            Some(q) if q == query => true,
            Some(_) => return None,
            None => false,
        };
        match &self.docs {
            DocPattern::Exact(ids) if ids.as_slice() == docs => Some((query_exact, true, ids.len())),
            DocPattern::Prefix(ids) if docs.starts_with(ids) => Some((query_exact, false, ids.len())),
            _ => None,
        }
    }
}

/// Deterministic backend that replays a [`MockScript`].
#[derive(Debug, Clone)]
pub struct MockBackend {
    script: MockScript,
    patterns: Vec<(Pattern, String)>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, String> {
        let patterns = script
            .responses
            .keys()
            .map(|k| Pattern::parse(k).map(|p| (p, k.clone())))
            .collect::<Result<_, _>>()?;
        Ok(Self { script, patterns })
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn lookup(&self, req: &GenerationRequest) -> Result<&MockEntry, BackendError> {
        let key = req.tag.key();
        if let Some(e) = self.script.responses.get(&key) {
            return Ok(e);
        }
        let role = req.tag.role.as_str();
        self.patterns
            .iter()
            .filter_map(|(p, k)| p.specificity(role, &req.tag.query_id, &req.tag.doc_ids).map(|s| (s, k)))
            .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(a.1)))
            .map(|(_, k)| &self.script.responses[k])
            .ok_or(BackendError::ScriptMiss(key))
    }
}

#[async_trait]
impl LlmBackend for MockBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        if req.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        let entry = self.lookup(req)?;
        if let Some(f) = &entry.error {
            return Err(match f {
                MockFailure::Unavailable(m) => BackendError::Unavailable { attempts: 1, message: m.clone() },
                MockFailure::Protocol(m) => BackendError::Protocol(m.clone()),
                MockFailure::LogprobsUnsupported(m) => BackendError::LogprobsUnsupported(m.clone()),
            });
        }
        let first_token_top_logprobs = match req.want_top_logprobs {
            0 => None,
            k => {
                let top = entry.top_logprobs.as_ref().ok_or_else(|| {
                    BackendError::LogprobsUnsupported(format!("no scripted logprobs for {}", req.tag.key()))
                })?;
                Some(top.iter().take(k as usize).cloned().collect())
            }
        };
        Ok(GenerationResponse {
            text: entry.text.clone(),
            first_token_top_logprobs,
            raw_metadata: serde_json::Value::Null,
        })
    }

    fn name(&self) -> &str {
        "mock"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{AgentRole, RequestTag};

    fn req(role: AgentRole, q: &str, docs: &[&str], k: u32) -> GenerationRequest {
        GenerationRequest {
            system_instruction: "sys".into(),
            user_prompt: "user".into(),
            max_tokens: 1,
            want_top_logprobs: k,
            tag: RequestTag { role, query_id: q.into(), doc_ids: docs.iter().map(|s| s.to_string()).collect() },
        }
    }

    use futures::executor::block_on;

    #[test]
    fn scripted_identity() {
        let mut s = MockScript::new();
        s.insert("judge|q1|d1", MockEntry::judge(-0.05, -3.10));
        let m = MockBackend::new(s).unwrap();
        let a = block_on(m.generate(&req(AgentRole::Judge, "q1", &["d1"], 20))).unwrap();
        let b = block_on(m.generate(&req(AgentRole::Judge, "q1", &["d1"], 20))).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.text, "Yes");
        assert_eq!(
            a.first_token_top_logprobs.unwrap(),
            vec![TokenLogprob::new("Yes", -0.05), TokenLogprob::new("No", -3.10)]
        );
    }

    #[test]
    fn zero_top_logprobs_omits_list() {
        let mut s = MockScript::new();
        s.insert("judge|q1|d1", MockEntry::judge(-0.05, -3.10));
        let m = MockBackend::new(s).unwrap();
        let r = block_on(m.generate(&req(AgentRole::Judge, "q1", &["d1"], 0))).unwrap();
        assert!(r.first_token_top_logprobs.is_none());
        assert_eq!(r.text, "Yes");
    }

    #[test]
    fn missing_key_is_an_error() {
        let m = MockBackend::new(MockScript::new()).unwrap();
        let err = block_on(m.generate(&req(AgentRole::Final, "q1", &[], 0))).unwrap_err();
        assert_eq!(err, BackendError::ScriptMiss("final|q1|".into()));
    }

    #[test]
    fn wildcard_precedence() {
        let mut s = MockScript::new();
        s.insert("final|q1|*", MockEntry::text("any"))
            .insert("final|q1|g,*", MockEntry::text("gold-first"))
            .insert("final|q1|g,x,*", MockEntry::text("longer"))
            .insert("final|*|g", MockEntry::text("wild-query"))
            .insert("final|q1|x,g", MockEntry::text("exact"));
        let m = MockBackend::new(s).unwrap();
        let text = |q: &str, d: &[&str]| block_on(m.generate(&req(AgentRole::Final, q, d, 0))).unwrap().text;
        assert_eq!(text("q1", &["x", "g"]), "exact");
        assert_eq!(text("q1", &["g", "y"]), "gold-first");
        assert_eq!(text("q1", &["g", "x", "y"]), "longer");
        assert_eq!(text("q1", &["y"]), "any");
        assert_eq!(text("q1", &["g"]), "gold-first");
        assert_eq!(text("q9", &["g"]), "wild-query");
    }

    #[test]
    fn scripted_failures() {
        let mut s = MockScript::new();
        s.insert("final|q2|*", MockEntry::failure(MockFailure::Unavailable("down".into())));
        let m = MockBackend::new(s).unwrap();
        let err = block_on(m.generate(&req(AgentRole::Final, "q2", &["a"], 0))).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable { .. }));
    }

    #[test]
    fn script_json_round_trip_and_version_check() {
        let mut s = MockScript::new();
        s.insert("predictor|q|d", MockEntry::text("x"));
        assert_eq!(MockScript::from_json(&s.to_json()).unwrap(), s);
        let bad = r#"{"schema_version": 9, "responses": {}}"#;
        assert!(MockScript::from_json(bad).unwrap_err().contains("schema_version"));
        let bad_key = r#"{"schema_version": 1, "responses": {"oops": {"text": ""}}}"#;
        assert!(MockScript::from_json(bad_key).is_err());
    }

    #[test]
    fn judge_score_helper_is_exact() {
        for s in [3.8, 2.5, 4.2, -1.25, 0.0] {
            let e = MockEntry::judge_score(s);
            let top = e.top_logprobs.unwrap();
            let yes = top.iter().find(|t| t.token == "Yes").unwrap().logprob;
            let no = top.iter().find(|t| t.token == "No").unwrap().logprob;
            assert_eq!(yes - no, s);
        }
    }
}
