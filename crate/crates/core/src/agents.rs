//! Prompt rendering and invocation for the predictor, judge and final-predictor agents.

use serde::Deserialize;
use thiserror::Error;

use crate::backend::{extract_yes_no_logprobs, AgentRole, BackendError, GenerationRequest, LlmBackend, RequestTag};
use crate::config::PipelineConfig;
use crate::types::{DocQaTriplet, FallbackFlags, JudgeVerdict, Query, RetrievedDocument};

const BUILTIN_PROMPTS: &str = include_str!("../assets/prompts.toml");

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TemplateError {
    #[error("placeholder {{{0}}} has no value")]
    Unfilled(String),
    #[error("unbalanced brace at byte {0}")]
    Unbalanced(usize),
    #[error("{role} template must contain {{{placeholder}}}")]
    MissingPlaceholder { role: &'static str, placeholder: &'static str },
    #[error("prompt file: {0}")]
    Parse(String),
}

/// A system instruction plus a user template with `{name}` placeholders.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Substitutes placeholders in one pass; substituted values are never re-scanned.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        render(&self.user, vars)
    }

    fn placeholders(&self) -> Result<Vec<&str>, TemplateError> {
        let mut names = Vec::new();
        scan(&self.user, |seg| {
            if let Segment::Placeholder(n) = seg {
                names.push(n);
            }
            Ok(())
        })?;
        Ok(names)
    }
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

fn scan<'a>(template: &'a str, mut f: impl FnMut(Segment<'a>) -> Result<(), TemplateError>) -> Result<(), TemplateError> {
    let bytes = template.as_bytes();
    let mut i = 0;
    let mut lit_start = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' if bytes.get(i + 1) == Some(&b'{') => {
                f(Segment::Literal(&template[lit_start..i + 1]))?;
                i += 2;
                lit_start = i;
            }
            b'}' if bytes.get(i + 1) == Some(&b'}') => {
                f(Segment::Literal(&template[lit_start..i + 1]))?;
                i += 2;
                lit_start = i;
            }
            b'{' => {
                f(Segment::Literal(&template[lit_start..i]))?;
                let close = template[i + 1..].find('}').ok_or(TemplateError::Unbalanced(i))? + i + 1;
                let name = &template[i + 1..close];
                if name.is_empty() || name.contains('{') {
                    return Err(TemplateError::Unbalanced(i));
                }
                f(Segment::Placeholder(name))?;
                i = close + 1;
                lit_start = i;
            }
            b'}' => return Err(TemplateError::Unbalanced(i)),
            _ => i += 1,
        }
    }
    f(Segment::Literal(&template[lit_start..]))
}

/// Renders `template`, failing if any placeholder has no value.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    scan(template, |seg| {
        match seg {
            Segment::Literal(s) => out.push_str(s),
            Segment::Placeholder(name) => {
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == name)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::Unfilled(name.to_string()))?;
                out.push_str(value);
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Templates for all three agents.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PromptSet {
    pub version: u32,
    pub predictor: PromptTemplate,
    pub judge: PromptTemplate,
    #[serde(rename = "final")]
    pub final_predictor: PromptTemplate,
}

impl PromptSet {
    /// The templates shipped in `assets/prompts.toml`.
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN_PROMPTS).expect("builtin prompts are valid")
    }

    pub fn from_toml(text: &str) -> Result<Self, TemplateError> {
        let set: PromptSet = toml::from_str(text).map_err(|e| TemplateError::Parse(e.to_string()))?;
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<(), TemplateError> {
        let required: [(&'static str, &PromptTemplate, &[&'static str]); 3] = [
            ("predictor", &self.predictor, &["document", "question"]),
            ("judge", &self.judge, &["document", "question", "llm_answer"]),
            ("final", &self.final_predictor, &["document_list", "question"]),
        ];
        for (role, tpl, needed) in required {
            let present = tpl.placeholders()?;
            for &placeholder in needed {
                if !present.contains(&placeholder) {
                    return Err(TemplateError::MissingPlaceholder { role, placeholder });
                }
            }
            for p in present {
                if !needed.contains(&p) {
                    return Err(TemplateError::Unfilled(p.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AgentError {
    #[error("{role} call failed for query {query_id}{}: {source}", doc_suffix(.doc_id))]
    Backend {
        role: &'static str,
        query_id: String,
        doc_id: Option<String>,
        #[source]
        source: BackendError,
    },
    #[error(
        "judge for query {query_id} doc {doc_id} got no token log-probabilities; \
         relevance scoring needs a backend that returns logprobs/top_logprobs, \
         so point the config at a logprob-capable endpoint or model ({detail})"
    )]
    JudgeNeedsLogprobs { query_id: String, doc_id: String, detail: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

fn doc_suffix(doc: &Option<String>) -> String {
    doc.as_ref().map(|d| format!(" doc {d}")).unwrap_or_default()
}

/// Keeps the first `budget` characters.
pub fn truncate_chars(text: &str, budget: usize) -> &str {
    match text.char_indices().nth(budget) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}

pub fn render_predictor_prompt(cfg: &PipelineConfig, query: &Query, doc: &RetrievedDocument) -> Result<String, TemplateError> {
    let text = truncate_chars(&doc.text, cfg.generation.doc_char_budget);
    cfg.prompts.predictor.render(&[("document", text), ("question", &query.text)])
}

pub fn render_judge_prompt(cfg: &PipelineConfig, triplet: &DocQaTriplet<'_>) -> Result<String, TemplateError> {
    let text = truncate_chars(&triplet.document.text, cfg.generation.doc_char_budget);
    cfg.prompts.judge.render(&[
        ("document", text),
        ("question", &triplet.query.text),
        ("llm_answer", &triplet.predicted_answer),
    ])
}

/// `Document 1: ...` blocks in the given order; empty for no documents.
pub fn render_document_list(cfg: &PipelineConfig, docs: &[&RetrievedDocument]) -> String {
    let mut out = String::new();
    for (i, d) in docs.iter().enumerate() {
        out.push_str(&format!("Document {}: {}\n\n", i + 1, truncate_chars(&d.text, cfg.generation.doc_char_budget)));
    }
    out
}

pub fn render_final_prompt(cfg: &PipelineConfig, query: &Query, docs: &[&RetrievedDocument]) -> Result<String, TemplateError> {
    let list = render_document_list(cfg, docs);
    cfg.prompts.final_predictor.render(&[("document_list", &list), ("question", &query.text)])
}

/// Agent-1: answer the query from a single document.
pub async fn predict_answer<'a, B: LlmBackend + ?Sized>(
    backend: &B,
    cfg: &PipelineConfig,
    query: &'a Query,
    doc: &'a RetrievedDocument,
) -> Result<DocQaTriplet<'a>, AgentError> {
    let req = GenerationRequest {
        system_instruction: cfg.prompts.predictor.system.clone(),
        user_prompt: render_predictor_prompt(cfg, query, doc)?,
        max_tokens: cfg.generation.predictor_max_tokens,
        want_top_logprobs: 0,
        tag: RequestTag { role: AgentRole::Predictor, query_id: query.id.clone(), doc_ids: vec![doc.doc_id.clone()] },
    };
    let resp = backend.generate(&req).await.map_err(|source| AgentError::Backend {
        role: "predictor",
        query_id: query.id.clone(),
        doc_id: Some(doc.doc_id.clone()),
        source,
    })?;
    Ok(DocQaTriplet { query, document: doc, predicted_answer: resp.text })
}

/// Agent-2: score one triplet as `log P(Yes) - log P(No)` of the first token.
pub async fn judge_triplet<B: LlmBackend + ?Sized>(
    backend: &B,
    triplet: &DocQaTriplet<'_>,
    cfg: &PipelineConfig,
) -> Result<JudgeVerdict, AgentError> {
    let query_id = triplet.query.id.clone();
    let doc_id = triplet.document.doc_id.clone();
    let req = GenerationRequest {
        system_instruction: cfg.prompts.judge.system.clone(),
        user_prompt: render_judge_prompt(cfg, triplet)?,
        max_tokens: 1,
        want_top_logprobs: cfg.generation.judge_top_logprobs.min(backend.max_top_logprobs()),
        tag: RequestTag { role: AgentRole::Judge, query_id: query_id.clone(), doc_ids: vec![doc_id.clone()] },
    };
    let lift = |source: BackendError| match source {
        BackendError::LogprobsUnsupported(detail) => {
            AgentError::JudgeNeedsLogprobs { query_id: query_id.clone(), doc_id: doc_id.clone(), detail }
        }
        source => AgentError::Backend { role: "judge", query_id: query_id.clone(), doc_id: Some(doc_id.clone()), source },
    };
    let resp = backend.generate(&req).await.map_err(lift)?;
    let lp = extract_yes_no_logprobs(&resp, &cfg.yes_token_variants, &cfg.no_token_variants, cfg.missing_logprob_floor)
        .map_err(lift)?;
    Ok(JudgeVerdict::new(doc_id, lp.yes, lp.no, FallbackFlags { yes: lp.fallback_yes, no: lp.fallback_no }))
}

/// Agent-3: answer the query from the ordered document list.
pub async fn final_answer<B: LlmBackend + ?Sized>(
    backend: &B,
    cfg: &PipelineConfig,
    query: &Query,
    ordered_docs: &[&RetrievedDocument],
) -> Result<String, AgentError> {
    let req = GenerationRequest {
        system_instruction: cfg.prompts.final_predictor.system.clone(),
        user_prompt: render_final_prompt(cfg, query, ordered_docs)?,
        max_tokens: cfg.generation.final_max_tokens,
        want_top_logprobs: 0,
        tag: RequestTag {
            role: AgentRole::Final,
            query_id: query.id.clone(),
            doc_ids: ordered_docs.iter().map(|d| d.doc_id.clone()).collect(),
        },
    };
    let resp = backend.generate(&req).await.map_err(|source| AgentError::Backend {
        role: "final",
        query_id: query.id.clone(),
        doc_id: None,
        source,
    })?;
    Ok(resp.text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{MockBackend, MockEntry, MockScript, RecordingBackend, TokenLogprob};
    use futures::executor::block_on;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    fn mock(entries: &[(&str, MockEntry)]) -> RecordingBackend<MockBackend> {
        let mut s = MockScript::new();
        for (k, e) in entries {
            s.insert(*k, e.clone());
        }
        RecordingBackend::new(MockBackend::new(s).unwrap())
    }

    fn montxu() -> (Query, RetrievedDocument) {
        (
            Query::open("q_montxu", "In what city was Montxu Miranda born?", &["Santurtzi", "Santurce"]),
            RetrievedDocument::new("d_bio", "Montxu Miranda Díez (born 27 December 1976 in Santurce) is a Spanish pole vaulter.", 1),
        )
    }

    #[test]
    fn render_rules() {
        assert_eq!(render("a {x} b", &[("x", "1")]).unwrap(), "a 1 b");
        assert_eq!(render("{{x}} {x}", &[("x", "{y}")]).unwrap(), "{x} {y}");
        assert_eq!(render("{x}", &[]), Err(TemplateError::Unfilled("x".into())));
        assert!(matches!(render("a { b", &[]), Err(TemplateError::Unbalanced(_))));
        assert!(matches!(render("a } b", &[]), Err(TemplateError::Unbalanced(_))));
    }

    #[test]
    fn builtin_prompts_load() {
        let p = PromptSet::builtin();
        assert_eq!(p.version, 1);
        assert!(p.judge.system.starts_with("You are a noisy document evaluator"));
        assert!(p.predictor.system.starts_with("You are an accurate and reliable AI assistant"));
        assert_eq!(p.predictor.system, p.final_predictor.system);
    }

    #[test]
    fn prompt_file_missing_placeholder_rejected() {
        let text = BUILTIN_PROMPTS.replace("LLM Answer: {llm_answer}", "LLM Answer:");
        assert_eq!(
            PromptSet::from_toml(&text),
            Err(TemplateError::MissingPlaceholder { role: "judge", placeholder: "llm_answer" })
        );
        let extra = r#"
            version = 1
            [predictor]
            system = "s"
            user = "{document} {question} {bogus}"
            [judge]
            system = "s"
            user = "{document} {question} {llm_answer}"
            [final]
            system = "s"
            user = "{document_list}{question}"
        "#;
        assert_eq!(PromptSet::from_toml(extra), Err(TemplateError::Unfilled("bogus".into())));
    }

    #[test]
    fn predictor_passthrough_and_empty() {
        let (q, d) = montxu();
        let m = mock(&[("predictor|q_montxu|d_bio", MockEntry::text("Santurce"))]);
        let t = block_on(predict_answer(&m, &cfg(), &q, &d)).unwrap();
        assert_eq!(t.predicted_answer, "Santurce");
        let m = mock(&[("predictor|q_montxu|d_bio", MockEntry::text(""))]);
        assert_eq!(block_on(predict_answer(&m, &cfg(), &q, &d)).unwrap().predicted_answer, "");
    }

    #[test]
    fn predictor_errors_are_tagged() {
        let (q, d) = montxu();
        let m = mock(&[]);
        let err = block_on(predict_answer(&m, &cfg(), &q, &d)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("q_montxu") && msg.contains("d_bio"), "{msg}");
    }

    #[test]
    fn truncated_document_appears_once() {
        let q = Query::open("q", "What?", &["x"]);
        let long: String = "abcdefghij".repeat(300);
        let d = RetrievedDocument::new("d", long.clone(), 1);
        let mut c = cfg();
        c.generation.doc_char_budget = 2048;
        let prompt = render_predictor_prompt(&c, &q, &d).unwrap();
        let kept = &long[..2048];
        assert_eq!(prompt.matches(kept).count(), 1);
        assert!(!prompt.contains(&long[..2049]));
        assert_eq!(prompt, format!("Document: {kept}\n\nQuestion: What?"));
    }

    #[test]
    fn truncation_counts_chars() {
        assert_eq!(truncate_chars("ééé", 2), "éé");
        assert_eq!(truncate_chars("ab", 5), "ab");
    }

    #[test]
    fn judge_scores() {
        let (q, d) = montxu();
        let t = DocQaTriplet { query: &q, document: &d, predicted_answer: "Santurce".into() };
        let cases = [
            (MockEntry::judge(-0.05, -3.10), 3.05, false),
            (MockEntry::judge(-0.69, -0.69), 0.0, false),
        ];
        for (entry, want, fallback) in cases {
            let m = mock(&[("judge|q_montxu|d_bio", entry)]);
            let v = block_on(judge_triplet(&m, &t, &cfg())).unwrap();
            assert!((v.relevance_score - want).abs() < 1e-12);
            assert_eq!(v.relevance_score, v.logprob_yes - v.logprob_no);
            assert_eq!(v.fallback_used.any(), fallback);
            let req = &m.requests()[0];
            assert_eq!((req.max_tokens, req.want_top_logprobs), (1, 20));
        }
        let only_yes = MockEntry { text: "Yes".into(), top_logprobs: Some(vec![TokenLogprob::new("Yes", -0.01)]), error: None };
        let m = mock(&[("judge|q_montxu|d_bio", only_yes)]);
        let v = block_on(judge_triplet(&m, &t, &cfg())).unwrap();
        assert!((v.relevance_score - 99.99).abs() < 1e-9);
        assert!(v.fallback_used.no && !v.fallback_used.yes);
    }

    #[test]
    fn judge_prompt_labels_fields() {
        let (q, d) = montxu();
        let t = DocQaTriplet { query: &q, document: &d, predicted_answer: "Santurce".into() };
        let p = render_judge_prompt(&cfg(), &t).unwrap();
        let doc = p.find("Document:").unwrap();
        let question = p.find("Question:").unwrap();
        let answer = p.find("LLM Answer: Santurce").unwrap();
        assert!(doc < question && question < answer);
    }

    #[test]
    fn judge_without_logprobs_gives_guidance() {
        let (q, d) = montxu();
        let t = DocQaTriplet { query: &q, document: &d, predicted_answer: "x".into() };
        let m = mock(&[("judge|q_montxu|d_bio", MockEntry::text("Yes"))]);
        let err = block_on(judge_triplet(&m, &t, &cfg())).unwrap_err();
        assert!(matches!(err, AgentError::JudgeNeedsLogprobs { .. }));
        assert!(err.to_string().contains("logprob-capable"));
    }

    #[test]
    fn final_answer_is_order_sensitive() {
        let q = Query::open("q1", "What is the capital of Gmina Czorsztyn?", &["Maniowy"]);
        let d1 = RetrievedDocument::new("d1", "Czosnów is a village.", 1);
        let d3 = RetrievedDocument::new("d3", "Sromowce Wyżne lies south-east of Maniowy.", 3);
        let m = mock(&[
            ("final|q1|d3,d1", MockEntry::text("Maniowy")),
            ("final|q1|d1,d3", MockEntry::text("Czosnów")),
            ("final|q1|", MockEntry::text("unsure")),
        ]);
        assert_eq!(block_on(final_answer(&m, &cfg(), &q, &[&d3, &d1])).unwrap(), "Maniowy");
        assert_eq!(block_on(final_answer(&m, &cfg(), &q, &[&d1, &d3])).unwrap(), "Czosnów");
        assert_eq!(block_on(final_answer(&m, &cfg(), &q, &[])).unwrap(), "unsure");
        let reqs = m.requests();
        let p = &reqs[0].user_prompt;
        assert!(p.find("Document 1: Sromowce").unwrap() < p.find("Document 2: Czosnów").unwrap());
        assert!(!reqs[2].user_prompt.contains("Document"));
        assert_eq!(reqs[2].user_prompt, "Question: What is the capital of Gmina Czorsztyn?");
    }

    #[test]
    fn rendering_is_deterministic() {
        let (q, d) = montxu();
        let a = render_final_prompt(&cfg(), &q, &[&d]).unwrap();
        let b = render_final_prompt(&cfg(), &q, &[&d]).unwrap();
        assert_eq!(a, b);
    }
}
