//! OpenAI-compatible HTTP backend.

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use super::{BackendError, GenerationRequest, GenerationResponse, LlmBackend, TokenLogprob};

/// Which endpoint and body shape to speak.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiShape {
    /// `POST {endpoint}/chat/completions`
    #[default]
    Chat,
    /// Legacy `POST {endpoint}/completions`
    Completions,
}

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Total attempts per request; transport failures only are retried.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_in_flight: usize,
    pub api_shape: ApiShape,
    pub max_top_logprobs: u32,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            initial_backoff: Duration::from_millis(250),
            max_in_flight: 16,
            api_shape: ApiShape::Chat,
            max_top_logprobs: 20,
        }
    }
}

pub struct HttpBackend {
    cfg: HttpBackendConfig,
    client: reqwest::Client,
    in_flight: Arc<Semaphore>,
}

enum Attempt {
    Retryable(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: HttpBackendConfig) -> Result<Self, BackendError> {
        if cfg.max_attempts == 0 || cfg.max_in_flight == 0 {
            return Err(BackendError::InvalidRequest("max_attempts and max_in_flight must be at least 1".into()));
        }
        let client = reqwest::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("http client: {e}")))?;
        let in_flight = Arc::new(Semaphore::new(cfg.max_in_flight));
        Ok(Self { cfg, client, in_flight })
    }

    fn url(&self) -> String {
        let base = self.cfg.endpoint.trim_end_matches('/');
        match self.cfg.api_shape {
            ApiShape::Chat => format!("{base}/chat/completions"),
            ApiShape::Completions => format!("{base}/completions"),
        }
    }

    fn body(&self, req: &GenerationRequest) -> Value {
        match self.cfg.api_shape {
            ApiShape::Chat => {
                let mut body = json!({
                    "model": self.cfg.model,
                    "messages": [
                        {"role": "system", "content": req.system_instruction},
                        {"role": "user", "content": req.user_prompt},
                    ],
                    "temperature": 0,
                    "max_tokens": req.max_tokens,
                });
                if req.want_top_logprobs > 0 {
                    body["logprobs"] = json!(true);
                    body["top_logprobs"] = json!(req.want_top_logprobs);
                }
                body
            }
            ApiShape::Completions => {
                let mut body = json!({
                    "model": self.cfg.model,
                    "prompt": format!("{}\n\n{}", req.system_instruction, req.user_prompt),
                    "temperature": 0,
                    "max_tokens": req.max_tokens,
                });
                if req.want_top_logprobs > 0 {
                    body["logprobs"] = json!(req.want_top_logprobs);
                }
                body
            }
        }
    }

    async fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut builder = self.client.post(self.url()).json(body);
        if let Some(key) = &self.cfg.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().await.map_err(|e| Attempt::Retryable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| Attempt::Retryable(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retryable(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::Protocol(format!("HTTP {status}: {}", snippet(&text)))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::Protocol(format!("response is not JSON: {e}"))))
    }
}

fn snippet(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Parses a chat-completions body into a [`GenerationResponse`].
pub(crate) fn parse_chat(body: Value, want_top_logprobs: u32) -> Result<GenerationResponse, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("missing choices[0]".into()))?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None if choice.get("message").is_some() => String::new(),
        _ => return Err(BackendError::Protocol("missing choices[0].message.content".into())),
    };
    let first_token_top_logprobs = if want_top_logprobs == 0 {
        None
    } else {
        let top = choice
            .pointer("/logprobs/content/0/top_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| {
                BackendError::LogprobsUnsupported("choices[0].logprobs.content[0].top_logprobs absent".into())
            })?;
        let parsed = top
            .iter()
            .map(|t| {
                let token = t.get("token").and_then(Value::as_str);
                let logprob = t.get("logprob").and_then(Value::as_f64);
                match (token, logprob) {
                    (Some(tok), Some(lp)) if lp.is_finite() => Ok(TokenLogprob::new(tok, lp)),
                    _ => Err(BackendError::Protocol(format!("malformed top_logprobs entry {t}"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Some(parsed)
    };
    Ok(GenerationResponse { text, first_token_top_logprobs, raw_metadata: metadata(&body) })
}

/// Parses a legacy completions body.
pub(crate) fn parse_completions(body: Value, want_top_logprobs: u32) -> Result<GenerationResponse, BackendError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::Protocol("missing choices[0]".into()))?;
    let text = choice
        .get("text")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].text".into()))?
        .to_string();
    let first_token_top_logprobs = if want_top_logprobs == 0 {
        None
    } else {
        let top = choice
            .pointer("/logprobs/top_logprobs/0")
            .and_then(Value::as_object)
            .ok_or_else(|| BackendError::LogprobsUnsupported("choices[0].logprobs.top_logprobs[0] absent".into()))?;
        let mut parsed = top
            .iter()
            .map(|(tok, lp)| match lp.as_f64() {
                Some(v) if v.is_finite() => Ok(TokenLogprob::new(tok.clone(), v)),
                _ => Err(BackendError::Protocol(format!("malformed logprob for token {tok:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        parsed.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.token.cmp(&b.token)));
        Some(parsed)
    };
    Ok(GenerationResponse { text, first_token_top_logprobs, raw_metadata: metadata(&body) })
}

fn metadata(body: &Value) -> Value {
    let mut m = serde_json::Map::new();
    for k in ["id", "model", "usage"] {
        if let Some(v) = body.get(k) {
            m.insert(k.to_string(), v.clone());
        }
    }
    Value::Object(m)
}

#[async_trait]
impl LlmBackend for HttpBackend {
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        if req.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if req.want_top_logprobs > self.cfg.max_top_logprobs {
            return Err(BackendError::InvalidRequest(format!(
                "want_top_logprobs {} exceeds backend maximum {}",
                req.want_top_logprobs, self.cfg.max_top_logprobs
            )));
        }
        let _permit = self.in_flight.acquire().await.expect("semaphore never closed");
        let body = self.body(req);
        let mut backoff = self.cfg.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=self.cfg.max_attempts {
            match self.attempt(&body).await {
                Ok(value) => {
                    debug!(key = %req.tag.key(), attempt, "backend call succeeded");
                    return match self.cfg.api_shape {
                        ApiShape::Chat => parse_chat(value, req.want_top_logprobs),
                        ApiShape::Completions => parse_completions(value, req.want_top_logprobs),
                    };
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(msg)) => {
                    warn!(key = %req.tag.key(), attempt, error = %msg, "transport failure");
                    last = msg;
                    if attempt < self.cfg.max_attempts {
                        tokio::time::sleep(backoff).await;
                        backoff *= 2;
                    }
                }
            }
        }
        Err(BackendError::Unavailable { attempts: self.cfg.max_attempts, message: last })
    }

    fn max_top_logprobs(&self) -> u32 {
        self.cfg.max_top_logprobs
    }

    fn name(&self) -> &str {
        &self.cfg.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_fixture_passes_pairs_through() {
        let body = json!({
            "id": "cmpl-1",
            "choices": [{
                "message": {"role": "assistant", "content": "Yes"},
                "logprobs": {"content": [{
                    "token": "Yes", "logprob": -0.01,
                    "top_logprobs": [
                        {"token": "Yes", "logprob": -0.01},
                        {"token": " No", "logprob": -4.7},
                        {"token": "No", "logprob": -5.2},
                        {"token": " Yes", "logprob": -6.0},
                        {"token": "The", "logprob": -9.5}
                    ]
                }]}
            }]
        });
        let r = parse_chat(body, 5).unwrap();
        assert_eq!(r.text, "Yes");
        let top = r.first_token_top_logprobs.unwrap();
        assert_eq!(top.len(), 5);
        assert_eq!(top[1], TokenLogprob::new(" No", -4.7));
        assert_eq!(r.raw_metadata["id"], "cmpl-1");
    }

    #[test]
    fn chat_without_logprobs_is_unsupported_only_when_requested() {
        let body = json!({"choices": [{"message": {"content": "Santurce"}}]});
        assert_eq!(parse_chat(body.clone(), 0).unwrap().text, "Santurce");
        assert!(matches!(parse_chat(body, 20), Err(BackendError::LogprobsUnsupported(_))));
    }

    #[test]
    fn malformed_chat_is_protocol_error() {
        assert!(matches!(parse_chat(json!({"object": "x"}), 0), Err(BackendError::Protocol(_))));
        let bad = json!({"choices": [{"message": {"content": "a"},
            "logprobs": {"content": [{"top_logprobs": [{"token": "a"}]}]}}]});
        assert!(matches!(parse_chat(bad, 1), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn null_content_reads_as_empty() {
        let body = json!({"choices": [{"message": {"content": null}}]});
        assert_eq!(parse_chat(body, 0).unwrap().text, "");
    }

    #[test]
    fn completions_fixture() {
        let body = json!({"choices": [{"text": " No", "logprobs": {"top_logprobs": [{" No": -0.3, " Yes": -1.4}]}}]});
        let r = parse_completions(body, 2).unwrap();
        assert_eq!(r.text, " No");
        assert_eq!(
            r.first_token_top_logprobs.unwrap(),
            vec![TokenLogprob::new(" No", -0.3), TokenLogprob::new(" Yes", -1.4)]
        );
    }

    #[test]
    fn chat_body_shape() {
        let b = HttpBackend::new(HttpBackendConfig { model: "m".into(), ..Default::default() }).unwrap();
        let req = GenerationRequest {
            system_instruction: "s".into(),
            user_prompt: "u".into(),
            max_tokens: 1,
            want_top_logprobs: 20,
            tag: super::super::RequestTag {
                role: super::super::AgentRole::Judge,
                query_id: "q".into(),
                doc_ids: vec!["d".into()],
            },
        };
        let body = b.body(&req);
        assert_eq!(body["temperature"], 0);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["top_logprobs"], 20);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "u");
        let no_lp = GenerationRequest { want_top_logprobs: 0, ..req };
        assert!(b.body(&no_lp).get("logprobs").is_none());
    }
}
