//! Deterministic mock corpora with matching backend scripts, for tests, demos
//! and offline experiments.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{MockEntry, MockScript};
use crate::eval::{Dataset, DatasetItem};
use crate::types::{NoiseLabel, Query, RetrievedDocument, TaskType};

/// The three-document example: scores 3.8, 2.5 and 4.2 for d1..d3.
pub fn worked_example() -> (Query, Vec<RetrievedDocument>, MockScript) {
    let query = Query::open("ex", "In what city was Montxu Miranda born?", &["Santurtzi", "Santurce"]);
    let docs = vec![
        RetrievedDocument::new("d1", "Montxu Miranda was born in Santurtzi, Biscay.", 1),
        RetrievedDocument::new("d2", "Santurtzi is a town in the province of Biscay.", 2),
        RetrievedDocument::new("d3", "Montxu Miranda (born 1976 in Santurce) is a Spanish pole vaulter.", 3),
    ];
    let mut script = MockScript::new();
    script
        .insert("predictor|ex|d1", MockEntry::text("Santurtzi"))
        .insert("predictor|ex|d2", MockEntry::text("Biscay"))
        .insert("predictor|ex|d3", MockEntry::text("Santurce"))
        .insert("judge|ex|d1", MockEntry::judge_score(3.8))
        .insert("judge|ex|d2", MockEntry::judge_score(2.5))
        .insert("judge|ex|d3", MockEntry::judge_score(4.2))
        .insert("final|ex|d3,d1", MockEntry::text("Montxu Miranda was born in Santurce."))
        .insert("final|ex|*", MockEntry::text("unscripted order"));
    (query, docs, script)
}

/// Shape of a generated open-QA corpus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusSpec {
    pub queries: usize,
    pub docs_per_query: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { queries: 25, docs_per_query: 6, seed: 42 }
    }
}

pub fn gold_answer(query_index: usize) -> String {
    format!("gold{query_index}")
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Labelled open-QA corpus whose final answers are position sensitive.
///
/// Query `i` has `1 + i % (docs_per_query - 1)` noisy documents, ranks are
/// shuffled across labels, relevant documents score in [4, 8] and noisy ones
/// in [-8, 8]. Agent-3 answers correctly iff the first document in its prompt
/// is relevant, so placing high-scoring documents first pays off.
pub fn position_sensitive_corpus(spec: CorpusSpec) -> (Dataset, MockScript) {
    assert!(spec.docs_per_query >= 2, "need room for one relevant and one noisy document");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut script = MockScript::new();
    script.insert("predictor|*|*", MockEntry::text("a guess"));
    let mut items = Vec::with_capacity(spec.queries);
    for i in 0..spec.queries {
        let qid = format!("q{i:03}");
        let noisy = 1 + i % (spec.docs_per_query - 1);
        let mut ranks: Vec<u32> = (1..=spec.docs_per_query as u32).collect();
        ranks.shuffle(&mut rng);
        let mut docs = Vec::with_capacity(spec.docs_per_query);
        for (j, rank) in ranks.into_iter().enumerate() {
            let doc_id = format!("{qid}-d{j}");
            let label = if j < noisy { NoiseLabel::Noisy } else { NoiseLabel::Relevant };
            let score = match label {
                NoiseLabel::Relevant => round3(8.0 - 4.0 * (1.0 - rng.random::<f64>().sqrt())),
                NoiseLabel::Noisy => round3(-8.0 + 16.0 * rng.random::<f64>()),
            };
            if label == NoiseLabel::Relevant {
                script.insert(format!("final|{qid}|{doc_id},*"), MockEntry::text(format!("The answer is {}.", gold_answer(i))));
            }
            script.insert(format!("judge|{qid}|{doc_id}"), MockEntry::judge_score(score));
            let text = match label {
                NoiseLabel::Relevant => format!("Passage {j} about question {i}. The answer is {}.", gold_answer(i)),
                NoiseLabel::Noisy => format!("Passage {j} on an unrelated topic."),
            };
            docs.push(RetrievedDocument::new(doc_id, text, rank).with_label(label));
        }
        docs.sort_by_key(|d| d.retrieval_rank);
        script.insert(format!("final|{qid}|*"), MockEntry::text("I am not sure."));
        let query = Query::open(qid, format!("What is the answer to question {i}?"), &[gold_answer(i).as_str()]);
        items.push(DatasetItem { query, documents: docs });
    }
    (Dataset { name: "position-sensitive".into(), task_type: TaskType::OpenQa, items }, script)
}
