//! Domain model shared by every stage of the pipeline.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Default cap on documents considered per query.
pub const DEFAULT_MAX_DOCS: usize = 20;

/// Which metric family scores a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    OpenQa,
    MultipleChoice,
    LongForm,
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskType::OpenQa => "open_qa",
            TaskType::MultipleChoice => "multiple_choice",
            TaskType::LongForm => "long_form",
        })
    }
}

/// One labelled option of a closed-set question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Choice {
    pub label: String,
    pub text: String,
}

/// A question plus whatever gold material its task type scores against.
///
/// For `long_form` queries `gold_answers` holds the long reference answers
/// used by ROUGE-L, and `qa_pairs` holds the short-answer sets used by str-em.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_pairs: Option<Vec<Vec<String>>>,
}

impl Query {
    /// Open-QA query with inclusion-scored gold answers.
    pub fn open(id: impl Into<String>, text: impl Into<String>, gold: &[&str]) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_answers: gold.iter().map(|s| s.to_string()).collect(),
            choices: None,
            answer_label: None,
            qa_pairs: None,
        }
    }

    /// Checks the invariants required by `task`.
    pub fn validate(&self, task: TaskType) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("query id is empty".into());
        }
        if self.text.trim().is_empty() {
            return Err(format!("query {}: question text is empty", self.id));
        }
        match task {
            TaskType::OpenQa => {
                if self.gold_answers.is_empty() {
                    return Err(format!("query {}: open_qa requires gold_answers", self.id));
                }
            }
            TaskType::MultipleChoice => {
                let choices = self
                    .choices
                    .as_deref()
                    .filter(|c| !c.is_empty())
                    .ok_or_else(|| format!("query {}: multiple_choice requires choices", self.id))?;
                let label = self
                    .answer_label
                    .as_deref()
                    .ok_or_else(|| format!("query {}: multiple_choice requires answer_label", self.id))?;
                if !choices.iter().any(|c| c.label == label) {
                    return Err(format!(
                        "query {}: answer_label {label:?} is not one of the choice labels",
                        self.id
                    ));
                }
                let labels: BTreeSet<_> = choices.iter().map(|c| c.label.as_str()).collect();
                if labels.len() != choices.len() {
                    return Err(format!("query {}: duplicate choice labels", self.id));
                }
            }
            TaskType::LongForm => {
                let pairs = self
                    .qa_pairs
                    .as_deref()
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| format!("query {}: long_form requires qa_pairs", self.id))?;
                if pairs.iter().any(|p| p.is_empty()) {
                    return Err(format!("query {}: empty short-answer set in qa_pairs", self.id));
                }
                if self.gold_answers.is_empty() {
                    return Err(format!(
                        "query {}: long_form requires gold_answers (long references for ROUGE-L)",
                        self.id
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Oracle label for controlled experiments. The pipeline never reads it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLabel {
    Relevant,
    Noisy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDocument {
    pub doc_id: String,
    pub text: String,
    /// 1 is the retriever's top hit.
    pub retrieval_rank: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_label: Option<NoiseLabel>,
}

impl RetrievedDocument {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>, retrieval_rank: u32) -> Self {
        Self {
            doc_id: doc_id.into(),
            text: text.into(),
            retrieval_rank,
            noise_label: None,
        }
    }

    pub fn with_label(mut self, label: NoiseLabel) -> Self {
        self.noise_label = Some(label);
        self
    }
}

/// Checks doc-id uniqueness, non-empty text and contiguous ranks `1..=N`.
pub fn validate_document_set(docs: &[RetrievedDocument]) -> Result<(), String> {
    let mut ids = BTreeSet::new();
    let mut ranks = BTreeSet::new();
    for d in docs {
        if d.doc_id.is_empty() {
            return Err("document with empty doc_id".into());
        }
        if d.text.trim().is_empty() {
            return Err(format!("document {}: empty text", d.doc_id));
        }
        if !ids.insert(d.doc_id.as_str()) {
            return Err(format!("duplicate doc_id {}", d.doc_id));
        }
        if !ranks.insert(d.retrieval_rank) {
            return Err(format!("duplicate retrieval_rank {}", d.retrieval_rank));
        }
    }
    let expected = 1..=docs.len() as u32;
    if !ranks.iter().copied().eq(expected) {
        return Err("retrieval_rank values must be contiguous from 1".into());
    }
    Ok(())
}

/// A document, its query, and the predictor's answer for that pair.
#[derive(Debug, Clone)]
pub struct DocQaTriplet<'a> {
    pub query: &'a Query,
    pub document: &'a RetrievedDocument,
    pub predicted_answer: String,
}

impl DocQaTriplet<'_> {
    pub fn record(&self) -> TripletRecord {
        TripletRecord { doc_id: self.document.doc_id.clone(), predicted_answer: self.predicted_answer.clone() }
    }
}

/// Serializable trace of one predictor call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub doc_id: String,
    pub predicted_answer: String,
}

/// Which side(s) of a judge verdict came from the missing-token floor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackFlags {
    pub yes: bool,
    pub no: bool,
}

impl FallbackFlags {
    pub fn any(&self) -> bool {
        self.yes || self.no
    }
}

/// The judge's Yes/No log-probabilities for one triplet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub doc_id: String,
    pub logprob_yes: f64,
    pub logprob_no: f64,
    /// Always `logprob_yes - logprob_no`.
    pub relevance_score: f64,
    pub fallback_used: FallbackFlags,
}

impl JudgeVerdict {
    pub fn new(doc_id: impl Into<String>, logprob_yes: f64, logprob_no: f64, fallback_used: FallbackFlags) -> Self {
        Self {
            doc_id: doc_id.into(),
            logprob_yes,
            logprob_no,
            relevance_score: logprob_yes - logprob_no,
            fallback_used,
        }
    }
}

/// Presentation order for the kept documents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderMode {
    Descending,
    Ascending,
    Random { seed: u64 },
}

impl Default for OrderMode {
    fn default() -> Self {
        OrderMode::Descending
    }
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderMode::Descending => f.write_str("descending"),
            OrderMode::Ascending => f.write_str("ascending"),
            OrderMode::Random { seed } => write!(f, "random({seed})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub doc_id: String,
    pub score: f64,
}

/// Audit trace of one filtering decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    /// Mean relevance score of the query's documents.
    pub tau: f64,
    /// Population standard deviation of the scores.
    pub sigma: f64,
    /// Relaxation multiplier; documents scoring at least `tau - n * sigma` are kept.
    pub n: f64,
    /// Kept documents in presentation order.
    pub kept: Vec<ScoredId>,
    pub dropped: Vec<ScoredId>,
    pub order_mode: OrderMode,
}

impl FilterOutcome {
    pub fn threshold(&self) -> f64 {
        self.tau - self.n * self.sigma
    }

    pub fn kept_ids(&self) -> Vec<&str> {
        self.kept.iter().map(|s| s.doc_id.as_str()).collect()
    }

    /// Checks the partition invariants against the ids of the input set.
    pub fn validate<'a, I>(&self, input_ids: I) -> Result<(), String>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let threshold = self.threshold();
        if !(self.sigma >= 0.0) || !(self.n >= 0.0) {
            return Err(format!("sigma {} and n {} must be non-negative", self.sigma, self.n));
        }
        for s in &self.kept {
            if !(s.score >= threshold) {
                return Err(format!("kept {} scores {} < threshold {}", s.doc_id, s.score, threshold));
            }
        }
        for s in &self.dropped {
            if !(s.score < threshold) {
                return Err(format!("dropped {} scores {} >= threshold {}", s.doc_id, s.score, threshold));
            }
        }
        let mut seen = BTreeSet::new();
        for s in self.kept.iter().chain(&self.dropped) {
            if !seen.insert(s.doc_id.as_str()) {
                return Err(format!("doc {} appears twice in the outcome", s.doc_id));
            }
        }
        let input: BTreeSet<&str> = input_ids.into_iter().collect();
        if input != seen {
            return Err("kept and dropped do not cover exactly the input set".into());
        }
        if !input.is_empty() && self.kept.is_empty() {
            return Err("kept is empty for a non-empty input".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(ranks: &[u32]) -> Vec<RetrievedDocument> {
        ranks
            .iter()
            .enumerate()
            .map(|(i, r)| RetrievedDocument::new(format!("d{i}"), "text", *r))
            .collect()
    }

    #[test]
    fn contiguous_ranks_are_accepted() {
        assert!(validate_document_set(&docs(&[2, 1, 3])).is_ok());
        assert!(validate_document_set(&[]).is_ok());
    }

    #[test]
    fn duplicate_or_gapped_ranks_are_rejected() {
        assert!(validate_document_set(&docs(&[1, 1])).unwrap_err().contains("duplicate retrieval_rank"));
        assert!(validate_document_set(&docs(&[1, 3])).unwrap_err().contains("contiguous"));
        assert!(validate_document_set(&docs(&[0, 1])).is_err());
    }

    #[test]
    fn query_task_invariants() {
        let q = Query::open("q", "who?", &["x"]);
        assert!(q.validate(TaskType::OpenQa).is_ok());
        assert!(q.validate(TaskType::MultipleChoice).is_err());
        let mut mc = Query::open("m", "which?", &[]);
        mc.choices = Some(vec![
            Choice { label: "A".into(), text: "one".into() },
            Choice { label: "B".into(), text: "two".into() },
        ]);
        mc.answer_label = Some("C".into());
        assert!(mc.validate(TaskType::MultipleChoice).is_err());
        mc.answer_label = Some("B".into());
        assert!(mc.validate(TaskType::MultipleChoice).is_ok());
    }

    #[test]
    fn verdict_score_is_difference() {
        let v = JudgeVerdict::new("d", -0.05, -3.10, FallbackFlags::default());
        assert_eq!(v.relevance_score, -0.05 - -3.10);
    }

    #[test]
    fn outcome_validator_catches_violations() {
        let good = FilterOutcome {
            tau: 3.5,
            sigma: 0.5,
            n: 0.0,
            kept: vec![ScoredId { doc_id: "a".into(), score: 4.0 }],
            dropped: vec![ScoredId { doc_id: "b".into(), score: 3.0 }],
            order_mode: OrderMode::Descending,
        };
        assert!(good.validate(["a", "b"]).is_ok());
        assert!(good.validate(["a", "b", "c"]).is_err());
        let mut bad = good.clone();
        bad.dropped[0].score = 3.5;
        assert!(bad.validate(["a", "b"]).is_err());
        let mut dup = good.clone();
        dup.dropped[0].doc_id = "a".into();
        assert!(dup.validate(["a"]).is_err());
    }

    #[test]
    fn order_mode_serde_shape() {
        let s = serde_json::to_string(&OrderMode::Random { seed: 7 }).unwrap();
        assert_eq!(s, r#"{"kind":"random","seed":7}"#);
        let d: OrderMode = serde_json::from_str(r#"{"kind":"descending"}"#).unwrap();
        assert_eq!(d, OrderMode::Descending);
    }
}
