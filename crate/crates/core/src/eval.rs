//! Dataset ingestion and QA metrics.
//!
//! Dataset files are JSON Lines, one query per line:
//!
//! ```json
//! {"id": "q1", "question": "In what city was Montxu Miranda born?", "task_type": "open_qa",
//!  "gold_answers": ["Santurtzi", "Santurce"],
//!  "documents": [{"doc_id": "d1", "text": "...", "retrieval_rank": 1, "noise_label": "relevant"}]}
//! ```
//!
//! `multiple_choice` lines carry `choices: [{label, text}]` and `answer_label`;
//! `long_form` lines carry `qa_pairs: [[short answers...], ...]` plus long
//! reference answers in `gold_answers`.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::RunRecord;
use crate::text::{normalize_text, normalized_tokens};
use crate::types::{validate_document_set, Choice, Query, RetrievedDocument, TaskType};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
#[error("{}{message}", location(.line, .query_id))]
pub struct IngestError {
    pub line: Option<usize>,
    pub query_id: Option<String>,
    pub message: String,
}

fn location(line: &Option<usize>, query: &Option<String>) -> String {
    match (line, query) {
        (Some(l), Some(q)) => format!("line {l} (query {q}): "),
        (Some(l), None) => format!("line {l}: "),
        (None, Some(q)) => format!("query {q}: "),
        (None, None) => String::new(),
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no records to aggregate")]
    Empty,
    #[error("record {query_id} has task type {found}, expected {expected}")]
    MixedTaskTypes { query_id: String, found: TaskType, expected: TaskType },
}

/// Supported dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
}

impl std::str::FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            other => Err(format!("unknown dataset format {other:?} (supported: jsonl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub query: Query,
    pub documents: Vec<RetrievedDocument>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task_type: TaskType,
    pub items: Vec<DatasetItem>,
}

/// On-disk line shape.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetLine {
    pub id: String,
    pub question: String,
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gold_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Choice>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_pairs: Option<Vec<Vec<String>>>,
    pub documents: Vec<RetrievedDocument>,
}

impl DatasetLine {
    pub fn from_item(item: &DatasetItem, task_type: TaskType) -> Self {
        let q = &item.query;
        Self {
            id: q.id.clone(),
            question: q.text.clone(),
            task_type,
            gold_answers: q.gold_answers.clone(),
            choices: q.choices.clone(),
            answer_label: q.answer_label.clone(),
            qa_pairs: q.qa_pairs.clone(),
            documents: item.documents.clone(),
        }
    }
}

impl Dataset {
    pub fn parse_jsonl(name: &str, text: &str) -> Result<Self, IngestError> {
        Self::read(name, BufReader::new(text.as_bytes()))
    }

    fn read(name: &str, reader: impl BufRead) -> Result<Self, IngestError> {
        let mut items = Vec::new();
        let mut task_type = None;
        let mut ids = BTreeSet::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let err = |query_id: Option<&str>, message: String| IngestError {
                line: Some(lineno),
                query_id: query_id.map(String::from),
                message,
            };
            let line = line.map_err(|e| err(None, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| err(None, format!("schema violation: {e}")))?;
            let id = raw.id.clone();
            match task_type {
                None => task_type = Some(raw.task_type),
                Some(t) if t != raw.task_type => {
                    return Err(err(Some(&id), format!("task_type {} differs from dataset task_type {t}", raw.task_type)))
                }
                _ => {}
            }
            if !ids.insert(id.clone()) {
                return Err(err(Some(&id), "duplicate query id".into()));
            }
            let query = Query {
                id: raw.id,
                text: raw.question,
                gold_answers: raw.gold_answers,
                choices: raw.choices,
                answer_label: raw.answer_label,
                qa_pairs: raw.qa_pairs,
            };
            query.validate(raw.task_type).map_err(|m| err(Some(&id), m))?;
            validate_document_set(&raw.documents).map_err(|m| err(Some(&id), m))?;
            items.push(DatasetItem { query, documents: raw.documents });
        }
        let task_type = task_type.ok_or_else(|| IngestError { line: None, query_id: None, message: "dataset is empty".into() })?;
        Ok(Dataset { name: name.to_string(), task_type, items })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for item in &self.items {
            out.push_str(&serde_json::to_string(&DatasetLine::from_item(item, self.task_type)).expect("dataset serializes"));
            out.push('\n');
        }
        out
    }
}

/// Reads a dataset file.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, IngestError> {
    let DatasetFormat::Jsonl = format;
    let file = std::fs::File::open(path).map_err(|e| IngestError {
        line: None,
        query_id: None,
        message: format!("{}: {e}", path.display()),
    })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::read(&name, BufReader::new(file))
}

/// True iff some normalized gold answer is a substring of the normalized answer.
pub fn inclusion_correct<S: AsRef<str>>(answer: &str, gold_answers: &[S]) -> bool {
    let answer = normalize_text(answer);
    gold_answers.iter().any(|g| {
        let g = normalize_text(g.as_ref());
        !g.is_empty() && answer.contains(&g)
    })
}

/// Letter-first multiple-choice scoring.
///
/// The first whitespace token of the normalized answer that equals a choice
/// label decides. With no such token, the answer is correct iff it contains
/// the gold choice's text. "A and B are wrong; C is right" therefore scores
/// as "A".
pub fn choice_correct(answer: &str, choices: &[Choice], answer_label: &str) -> bool {
    let labels: Vec<String> = choices.iter().map(|c| normalize_text(&c.label)).collect();
    let gold = normalize_text(answer_label);
    if let Some(token) = normalized_tokens(answer).into_iter().find(|t| labels.contains(t)) {
        return token == gold;
    }
    choices
        .iter()
        .find(|c| c.label == answer_label)
        .is_some_and(|c| inclusion_correct(answer, &[c.text.as_str()]))
}

/// Fraction of short-answer sets with at least one member included in the answer.
pub fn str_em(answer: &str, qa_pairs: &[Vec<String>]) -> f64 {
    if qa_pairs.is_empty() {
        return 0.0;
    }
    let hits = qa_pairs.iter().filter(|set| inclusion_correct(answer, set)).count();
    hits as f64 / qa_pairs.len() as f64
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level ROUGE-L F1, maximized over references.
pub fn rouge_l<S: AsRef<str>>(answer: &str, references: &[S]) -> f64 {
    let cand = normalized_tokens(answer);
    references
        .iter()
        .map(|r| {
            let reference = normalized_tokens(r.as_ref());
            let lcs = lcs_len(&cand, &reference);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / cand.len() as f64;
            let r = lcs as f64 / reference.len() as f64;
            2.0 * p * r / (p + r)
        })
        .fold(0.0, f64::max)
}

/// Per-query evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub query_id: String,
    pub task_type: TaskType,
    pub final_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub str_em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub kept_count: usize,
    /// Set when the pipeline failed for this query; no metric is populated then.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn scored(query: &Query, task_type: TaskType, final_answer: &str, kept_count: usize) -> Self {
        let mut rec = Self {
            query_id: query.id.clone(),
            task_type,
            final_answer: final_answer.to_string(),
            correct: None,
            str_em: None,
            rouge_l: None,
            kept_count,
            error: None,
        };
        match task_type {
            TaskType::OpenQa => rec.correct = Some(inclusion_correct(final_answer, &query.gold_answers)),
            TaskType::MultipleChoice => {
                let choices = query.choices.as_deref().unwrap_or_default();
                let label = query.answer_label.as_deref().unwrap_or_default();
                rec.correct = Some(choice_correct(final_answer, choices, label));
            }
            TaskType::LongForm => {
                rec.str_em = Some(str_em(final_answer, query.qa_pairs.as_deref().unwrap_or_default()));
                rec.rouge_l = Some(rouge_l(final_answer, &query.gold_answers));
            }
        }
        rec
    }

    pub fn failed(query_id: &str, task_type: TaskType, error: impl Into<String>) -> Self {
        Self {
            query_id: query_id.to_string(),
            task_type,
            final_answer: String::new(),
            correct: None,
            str_em: None,
            rouge_l: None,
            kept_count: 0,
            error: Some(error.into()),
        }
    }

    /// Accuracy for closed tasks, str-em for long-form; `None` for failures.
    pub fn primary_metric(&self) -> Option<f64> {
        match self.task_type {
            TaskType::OpenQa | TaskType::MultipleChoice => self.correct.map(|c| if c { 1.0 } else { 0.0 }),
            TaskType::LongForm => self.str_em,
        }
    }
}

/// Dataset-level metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub task_type: TaskType,
    /// Records aggregated, failures included.
    pub count: usize,
    /// Records that produced an answer.
    pub scored: usize,
    pub errors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub str_em: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
    pub mean_kept_count: f64,
}

impl Report {
    /// The task's headline metric.
    pub fn primary_metric(&self) -> Option<f64> {
        match self.task_type {
            TaskType::OpenQa | TaskType::MultipleChoice => self.accuracy,
            TaskType::LongForm => self.str_em,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_else(|| "-".into());
        let mut out = String::new();
        let _ = writeln!(out, "{:<18} {:>10}", "metric", "value");
        let _ = writeln!(out, "{:<18} {:>10}", "task", self.task_type.to_string());
        let _ = writeln!(out, "{:<18} {:>10}", "queries", self.count);
        let _ = writeln!(out, "{:<18} {:>10}", "errors", self.errors);
        match self.task_type {
            TaskType::OpenQa | TaskType::MultipleChoice => {
                let _ = writeln!(out, "{:<18} {:>10}", "acc (%)", pct(self.accuracy));
            }
            TaskType::LongForm => {
                let _ = writeln!(out, "{:<18} {:>10}", "str-em (%)", pct(self.str_em));
                let _ = writeln!(out, "{:<18} {:>10}", "rouge-l (%)", pct(self.rouge_l));
            }
        }
        let _ = writeln!(out, "{:<18} {:>10.2}", "mean kept docs", self.mean_kept_count);
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Aggregates homogeneous records. Records are reduced in `query_id` order so
/// the report does not depend on record order.
pub fn aggregate(records: &[EvalRecord], task_type: TaskType) -> Result<Report, AggregationError> {
    if records.is_empty() {
        return Err(AggregationError::Empty);
    }
    if let Some(r) = records.iter().find(|r| r.task_type != task_type) {
        return Err(AggregationError::MixedTaskTypes {
            query_id: r.query_id.clone(),
            found: r.task_type,
            expected: task_type,
        });
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let ok: Vec<&EvalRecord> = sorted.iter().copied().filter(|r| r.error.is_none()).collect();
    let closed = matches!(task_type, TaskType::OpenQa | TaskType::MultipleChoice);
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        task_type,
        count: records.len(),
        scored: ok.len(),
        errors: records.len() - ok.len(),
        accuracy: if closed { mean(ok.iter().filter_map(|r| r.correct).map(|c| f64::from(u8::from(c)))) } else { None },
        str_em: if closed { None } else { mean(ok.iter().filter_map(|r| r.str_em)) },
        rouge_l: if closed { None } else { mean(ok.iter().filter_map(|r| r.rouge_l)) },
        mean_kept_count: mean(ok.iter().map(|r| r.kept_count as f64)).unwrap_or(0.0),
    })
}

/// Scores a results file against its dataset, in dataset order. Queries with
/// no record are left out.
pub fn evaluate_run(dataset: &Dataset, records: &[RunRecord]) -> Vec<EvalRecord> {
    let by_id: HashMap<&str, &RunRecord> = records.iter().map(|r| (r.query_id(), r)).collect();
    dataset
        .items
        .iter()
        .filter_map(|item| {
            let rec = match by_id.get(item.query.id.as_str())? {
                RunRecord::Result(r) => EvalRecord::scored(&item.query, dataset.task_type, &r.final_answer, r.kept_count()),
                RunRecord::Error(e) => EvalRecord::failed(&item.query.id, dataset.task_type, e.message.clone()),
            };
            Some(rec)
        })
        .collect()
}
