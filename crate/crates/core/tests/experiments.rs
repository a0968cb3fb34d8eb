use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ragjudge_core::backend::{LlmBackend, MockBackend, MockEntry, MockScript};
use ragjudge_core::eval::{Dataset, DatasetItem};
use ragjudge_core::experiments::{
    labeled_scores, ojb_sweep, ordering_variance_experiment, synthetic_score_study, tau_ablation, NoiseCondition,
    ScoreDistribution, SyntheticDistSpec,
};
use ragjudge_core::fixtures::{position_sensitive_corpus, CorpusSpec};
use ragjudge_core::pipeline::Pipeline;
use ragjudge_core::{NoiseLabel, OrderMode, PipelineConfig, Query, RetrievedDocument, TaskType};

fn backend(script: MockScript) -> Arc<dyn LlmBackend> {
    Arc::new(MockBackend::new(script).unwrap())
}

/// One query with a relevant and a noisy document; correct iff the relevant
/// one is shown first.
fn two_doc_dataset() -> (Dataset, MockScript) {
    let docs = vec![
        RetrievedDocument::new("g", "gold passage", 1).with_label(NoiseLabel::Relevant),
        RetrievedDocument::new("n", "noise passage", 2).with_label(NoiseLabel::Noisy),
    ];
    let item = DatasetItem { query: Query::open("q", "which?", &["right"]), documents: docs };
    let mut script = MockScript::new();
    script.insert("final|q|g,n", MockEntry::text("right")).insert("final|q|n,g", MockEntry::text("wrong"));
    (Dataset { name: "two".into(), task_type: TaskType::OpenQa, items: vec![item] }, script)
}

#[tokio::test]
async fn ordering_variance_spans_full_range() {
    let (d, s) = two_doc_dataset();
    let cfg = PipelineConfig::default();
    let r = ordering_variance_experiment(&cfg, &d, 10, 42, backend(s.clone())).await.unwrap();
    let c = &r.conditions[0];
    assert_eq!(c.condition, NoiseCondition { noisy: 1, total: 2 });
    assert_eq!((c.min, c.max), (0.0, 1.0));
    assert_eq!(c.trial_metrics.len(), 10);

    let again = ordering_variance_experiment(&cfg, &d, 10, 42, backend(s.clone())).await.unwrap();
    assert_eq!(r, again);
    assert_eq!(r.to_csv(), again.to_csv());

    let one = ordering_variance_experiment(&cfg, &d, 1, 42, backend(s)).await.unwrap();
    assert_eq!(one.conditions[0].min, one.conditions[0].max);
}

#[tokio::test]
async fn position_insensitive_script_has_no_spread() {
    let (dataset, _) = position_sensitive_corpus(CorpusSpec { queries: 8, docs_per_query: 4, seed: 5 });
    let mut script = MockScript::new();
    script.insert("final|*|*", MockEntry::text("gold1 gold3"));
    let r = ordering_variance_experiment(&PipelineConfig::default(), &dataset, 6, 1, backend(script)).await.unwrap();
    assert!(r.conditions.len() > 1);
    assert!(r.conditions.iter().all(|c| c.min == c.max));
}

#[tokio::test]
async fn unlabeled_dataset_is_rejected() {
    let (mut d, s) = two_doc_dataset();
    d.items[0].documents[1].noise_label = None;
    let err = ordering_variance_experiment(&PipelineConfig::default(), &d, 2, 0, backend(s)).await.unwrap_err();
    assert!(err.to_string().contains("noise_label"));
}

#[tokio::test]
async fn ablation_grid_shape_and_properties() {
    let (dataset, script) = position_sensitive_corpus(CorpusSpec::default());
    let n_values = [0.0, 0.5, 1.0, 1.5];
    let modes = [OrderMode::Descending, OrderMode::Ascending];
    let t = tau_ablation(&PipelineConfig::default(), &dataset, &n_values, &modes, backend(script)).await.unwrap();
    assert_eq!(t.cells.len(), 8);
    for mode in modes {
        let kept: Vec<f64> = n_values.iter().map(|n| t.cell(*n, mode).unwrap().mean_kept_count).collect();
        assert!(kept.windows(2).all(|w| w[0] <= w[1]), "{mode}: {kept:?}");
    }
    for n in n_values {
        let desc = t.cell(n, OrderMode::Descending).unwrap().metric.unwrap();
        let asc = t.cell(n, OrderMode::Ascending).unwrap().metric.unwrap();
        assert!(desc >= asc, "n={n}: {desc} < {asc}");
    }
    let table = t.to_table();
    assert_eq!(table.lines().count(), 3);
    assert!(t.to_csv().starts_with("n,order_mode,metric,mean_kept_count,errors\n0,descending,"));
}

#[tokio::test]
async fn ablation_marks_failed_cells() {
    let (dataset, _) = position_sensitive_corpus(CorpusSpec { queries: 2, docs_per_query: 2, seed: 1 });
    let t = tau_ablation(&PipelineConfig::default(), &dataset, &[0.0], &[OrderMode::Descending], backend(MockScript::new()))
        .await
        .unwrap();
    assert_eq!(t.cells[0].metric, None);
    assert_eq!(t.cells[0].errors, 2);
    assert!(t.to_table().contains("failed"));
}

#[tokio::test]
async fn ojb_sweep_from_pipeline_results() {
    let (dataset, script) = position_sensitive_corpus(CorpusSpec { queries: 12, docs_per_query: 5, seed: 8 });
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    Pipeline::new(PipelineConfig::default(), backend(script)).run_dataset(&dataset, &path).await.unwrap();
    let records = ragjudge_core::pipeline::read_results(&path).unwrap();
    let labeled = labeled_scores(&dataset, &records).unwrap();
    assert_eq!(labeled.len(), 12);
    let sweep = ojb_sweep(&labeled, &[]);
    assert_eq!(sweep.points.len(), 12);
    assert_eq!(sweep.dispersion.len(), 4);
    for p in &sweep.points {
        let q = labeled.iter().find(|l| l.query_id == p.query_id).unwrap();
        let max_noisy = q.scores.iter().filter(|s| s.label == NoiseLabel::Noisy).map(|s| s.score).fold(f64::MIN, f64::max);
        let min_rel = q.scores.iter().filter(|s| s.label == NoiseLabel::Relevant).map(|s| s.score).fold(f64::MAX, f64::min);
        assert_eq!(p.separable, min_rel > max_noisy);
        if p.separable {
            assert_eq!(p.threshold, (max_noisy + min_rel) / 2.0);
        }
    }
    let only = ojb_sweep(&labeled, &[NoiseCondition { noisy: 2, total: 5 }]);
    assert!(only.points.iter().all(|p| p.condition.noisy == 2));
}

#[test]
fn synthetic_default_matches_frozen_values() {
    let s = synthetic_score_study(&SyntheticDistSpec::default()).unwrap();
    assert!((s.relevant_recall - 0.9816).abs() < 1e-9, "{}", s.relevant_recall);
    assert!((s.noisy_removal - 0.7186).abs() < 1e-9, "{}", s.noisy_removal);
    assert_eq!(s.trials.len(), 1000);
    assert_eq!(s.relevant_histogram.total() + s.noisy_histogram.total(), 10_000);

    // trial 0 by hand: five skew-high draws then five uniform draws from
    // ChaCha8 seeded with 42 ^ 0, a plain mean, and counts on each side
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rel: Vec<f64> = (0..5).map(|_| 4.0 + 6.0 * rng.random::<f64>().sqrt()).collect();
    let noisy: Vec<f64> = (0..5).map(|_| -10.0 + 20.0 * rng.random::<f64>()).collect();
    let mean = rel.iter().chain(&noisy).sum::<f64>() / 10.0;
    let t = s.trials[0];
    assert!((t.tau - mean).abs() < 1e-12);
    assert_eq!(t.relevant_recall, rel.iter().filter(|x| **x >= mean).count() as f64 / 5.0);
    assert_eq!(t.noisy_removal, noisy.iter().filter(|x| **x < mean).count() as f64 / 5.0);
}

#[test]
fn synthetic_bounds_hold_across_specs() {
    for (loc, lo) in [(2.0, -4.0), (8.0, -8.0), (1.0, 0.0)] {
        let spec = SyntheticDistSpec {
            relevant_dist: ScoreDistribution::SkewHigh { location: loc, spread: 3.0 },
            noisy_dist: ScoreDistribution::Uniform { lo, hi: 6.0 },
            n_relevant: 3,
            n_noisy: 7,
            trials: 200,
            seed: 11,
        };
        let s = synthetic_score_study(&spec).unwrap();
        assert!((0.0..=1.0).contains(&s.relevant_recall) && (0.0..=1.0).contains(&s.noisy_removal));
        assert!(s.trials.iter().all(|t| (0.0..=1.0).contains(&t.relevant_recall)));
    }
}
