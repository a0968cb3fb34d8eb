//! Relevance statistics, adaptive thresholding, filtering and ordering.
//!
//! Everything here is pure. A query's documents are kept when their
//! relevance score is at least `mean - n * sigma` of that query's score
//! vector, with `sigma` the population standard deviation. Because the
//! maximum score is never below the mean, the kept set is never empty.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{FilterOutcome, JudgeVerdict, NoiseLabel, OrderMode, RetrievedDocument, ScoredId};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum FilterError {
    #[error("score set is empty")]
    EmptyScoreSet,
    #[error("score {0} is not finite")]
    NonFiniteScore(f64),
    #[error("random ordering requires a seed")]
    MissingSeed,
    #[error("labelled scores need at least one relevant and one noisy entry")]
    DegenerateLabels,
    #[error("histogram range [{0}, {1}] is invalid")]
    BadRange(f64, f64),
    #[error("histogram needs at least one bin")]
    ZeroBins,
}

/// A document's identity within its query plus its relevance score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDocument {
    pub doc_id: String,
    pub retrieval_rank: u32,
    pub score: f64,
}

impl ScoredDocument {
    pub fn new(doc_id: impl Into<String>, retrieval_rank: u32, score: f64) -> Self {
        Self { doc_id: doc_id.into(), retrieval_rank, score }
    }

    pub fn from_verdict(doc: &RetrievedDocument, verdict: &JudgeVerdict) -> Self {
        debug_assert_eq!(doc.doc_id, verdict.doc_id);
        Self::new(doc.doc_id.clone(), doc.retrieval_rank, verdict.relevance_score)
    }

    fn id(&self) -> ScoredId {
        ScoredId { doc_id: self.doc_id.clone(), score: self.score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub sigma: f64,
}

/// Arithmetic mean and population standard deviation.
///
/// Values are accumulated in ascending order, offset by the minimum, so the
/// result is bit-identical for every permutation of the input and a constant
/// vector yields exactly `(c, 0)`. The mean is clamped into `[min, max]`.
pub fn score_stats(scores: &[f64]) -> Result<ScoreStats, FilterError> {
    if scores.is_empty() {
        return Err(FilterError::EmptyScoreSet);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(FilterError::NonFiniteScore(bad));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];
    let count = sorted.len() as f64;
    let offset_sum: f64 = sorted.iter().map(|s| s - min).sum();
    let mean = (min + offset_sum / count).clamp(min, max);
    let sq: f64 = sorted.iter().map(|s| (s - mean) * (s - mean)).sum();
    Ok(ScoreStats { mean, sigma: (sq / count).sqrt() })
}

/// `mean - n * sigma`; with `n = 0` this is the plain per-query mean.
pub fn adaptive_judge_bar(scores: &[f64], n: f64) -> Result<f64, FilterError> {
    let s = score_stats(scores)?;
    Ok(s.mean - n * s.sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterSplit {
    /// In input order.
    pub kept: Vec<ScoredDocument>,
    /// Sorted by retrieval rank.
    pub dropped: Vec<ScoredDocument>,
}

/// Keeps every document scoring at least `threshold` (inclusive).
pub fn filter_documents(scored: &[ScoredDocument], threshold: f64) -> FilterSplit {
    let (kept, mut dropped): (Vec<_>, Vec<_>) = scored.iter().cloned().partition(|s| s.score >= threshold);
    dropped.sort_by_key(|s| s.retrieval_rank);
    FilterSplit { kept, dropped }
}

/// What the config says about ordering before a seed is attached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Descending,
    Ascending,
    Random,
}

impl OrderKind {
    pub fn with_seed(self, seed: Option<u64>) -> Result<OrderMode, FilterError> {
        match self {
            OrderKind::Descending => Ok(OrderMode::Descending),
            OrderKind::Ascending => Ok(OrderMode::Ascending),
            OrderKind::Random => seed.map(|seed| OrderMode::Random { seed }).ok_or(FilterError::MissingSeed),
        }
    }
}

/// Orders kept documents for presentation.
///
/// Descending and ascending sort by score and break ties by ascending
/// retrieval rank. Random mode first sorts by retrieval rank and then applies
/// a seeded shuffle, so the result depends only on the set and the seed.
pub fn order_documents(kept: &[ScoredDocument], mode: OrderMode) -> Vec<ScoredDocument> {
    let mut out = kept.to_vec();
    match mode {
        OrderMode::Descending => {
            out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.retrieval_rank.cmp(&b.retrieval_rank)))
        }
        OrderMode::Ascending => {
            out.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.retrieval_rank.cmp(&b.retrieval_rank)))
        }
        OrderMode::Random { seed } => {
            out.sort_by_key(|s| s.retrieval_rank);
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    out
}

/// Stats, threshold, partition and ordering in one step.
pub fn apply_filter(scored: &[ScoredDocument], n: f64, mode: OrderMode) -> Result<FilterOutcome, FilterError> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let stats = score_stats(&scores)?;
    let split = filter_documents(scored, stats.mean - n * stats.sigma);
    let ordered = order_documents(&split.kept, mode);
    Ok(FilterOutcome {
        tau: stats.mean,
        sigma: stats.sigma,
        n,
        kept: ordered.iter().map(ScoredDocument::id).collect(),
        dropped: split.dropped.iter().map(ScoredDocument::id).collect(),
        order_mode: mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledScore {
    pub score: f64,
    pub label: NoiseLabel,
}

impl LabeledScore {
    pub fn relevant(score: f64) -> Self {
        Self { score, label: NoiseLabel::Relevant }
    }

    pub fn noisy(score: f64) -> Self {
        Self { score, label: NoiseLabel::Noisy }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimalBar {
    pub threshold: f64,
    /// True when some threshold keeps every relevant and drops every noisy entry.
    pub separable: bool,
    /// F1 of "kept = relevant" at `threshold`.
    pub f1: f64,
}

/// F1 of treating `score >= threshold` as a relevance prediction.
pub fn threshold_f1(labeled: &[LabeledScore], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
    for l in labeled {
        match (l.score >= threshold, l.label) {
            (true, NoiseLabel::Relevant) => tp += 1,
            (true, NoiseLabel::Noisy) => fp += 1,
            (false, NoiseLabel::Relevant) => fn_ += 1,
            (false, NoiseLabel::Noisy) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    f64::from(2 * tp) / f64::from(2 * tp + fp + fn_)
}

/// The judge bar that best separates relevant from noisy scores.
///
/// When the classes are separable this is the midpoint between the highest
/// noisy and the lowest relevant score. Otherwise it is the F1-maximizing
/// threshold among the distinct scores and the midpoints between adjacent
/// distinct scores, preferring the largest on ties.
pub fn optimal_judge_bar(labeled: &[LabeledScore]) -> Result<OptimalBar, FilterError> {
    if let Some(l) = labeled.iter().find(|l| !l.score.is_finite()) {
        return Err(FilterError::NonFiniteScore(l.score));
    }
    let of = |label| labeled.iter().filter(move |l| l.label == label).map(|l| l.score);
    let min_relevant = of(NoiseLabel::Relevant).reduce(f64::min).ok_or(FilterError::DegenerateLabels)?;
    let max_noisy = of(NoiseLabel::Noisy).reduce(f64::max).ok_or(FilterError::DegenerateLabels)?;
    if min_relevant > max_noisy {
        let threshold = (max_noisy + min_relevant) / 2.0;
        return Ok(OptimalBar { threshold, separable: true, f1: threshold_f1(labeled, threshold) });
    }
    let mut distinct: Vec<f64> = labeled.iter().map(|l| l.score).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = distinct.clone();
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let mut best = OptimalBar { threshold: f64::NEG_INFINITY, separable: false, f1: -1.0 };
    for t in candidates {
        let f1 = threshold_f1(labeled, t);
        if f1 > best.f1 || (f1 == best.f1 && t > best.threshold) {
            best = OptimalBar { threshold: t, separable: false, f1 };
        }
    }
    Ok(best)
}

/// Equal-width histogram record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Values below `lo` (explicit ranges only).
    pub underflow: u64,
    /// Values above `hi` (explicit ranges only).
    pub overflow: u64,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        let width = (self.hi - self.lo) / bins as f64;
        (0..=bins).map(|i| if i == bins { self.hi } else { self.lo + width * i as f64 }).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    /// `bin_lo,bin_hi,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let edges = self.edges();
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", edges[i], edges[i + 1], c));
        }
        out
    }
}

/// Bins are half-open `[lo + i*w, lo + (i+1)*w)` except the last, which also
/// takes `hi`. Without an explicit range, `[min, max]` of the data is used;
/// a zero-width data range is widened to `[v - 0.5, v + 0.5]`.
pub fn score_histogram(scores: &[f64], bin_count: usize, range: Option<(f64, f64)>) -> Result<Histogram, FilterError> {
    if scores.is_empty() {
        return Err(FilterError::EmptyScoreSet);
    }
    if bin_count == 0 {
        return Err(FilterError::ZeroBins);
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(FilterError::NonFiniteScore(bad));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(FilterError::BadRange(lo, hi));
            }
            (lo, hi)
        }
        None => {
            let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min == max {
                (min - 0.5, max + 0.5)
            } else {
                (min, max)
            }
        }
    };
    let width = (hi - lo) / bin_count as f64;
    let mut h = Histogram { lo, hi, counts: vec![0; bin_count], underflow: 0, overflow: 0 };
    for &s in scores {
        if s < lo {
            h.underflow += 1;
        } else if s > hi {
            h.overflow += 1;
        } else {
            let idx = (((s - lo) / width).floor() as usize).min(bin_count - 1);
            h.counts[idx] += 1;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn worked_vector() -> Vec<ScoredDocument> {
        vec![ScoredDocument::new("d1", 1, 3.8), ScoredDocument::new("d2", 2, 2.5), ScoredDocument::new("d3", 3, 4.2)]
    }

    fn ids(v: &[ScoredDocument]) -> Vec<&str> {
        v.iter().map(|s| s.doc_id.as_str()).collect()
    }

    #[test]
    fn stats_examples() {
        let s = score_stats(&[3.8, 2.5, 4.2]).unwrap();
        assert!((s.mean - 3.5).abs() < 1e-12);
        assert!((s.sigma - (1.58f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((s.sigma - 0.72572).abs() < 1e-5);
        for c in [0.1, -7.3, 1e9] {
            assert_eq!(score_stats(&[c, c, c]).unwrap(), ScoreStats { mean: c, sigma: 0.0 });
        }
        assert_eq!(score_stats(&[5.0]).unwrap(), ScoreStats { mean: 5.0, sigma: 0.0 });
        assert_eq!(score_stats(&[]), Err(FilterError::EmptyScoreSet));
        assert!(matches!(score_stats(&[1.0, f64::NAN]), Err(FilterError::NonFiniteScore(_))));
    }

    #[test]
    fn adaptive_bar_examples() {
        assert!((adaptive_judge_bar(&[3.8, 2.5, 4.2], 0.0).unwrap() - 3.5).abs() < 1e-12);
        assert!((adaptive_judge_bar(&[3.8, 2.5, 4.2], 1.0).unwrap() - 2.77428).abs() < 1e-5);
        assert_eq!(adaptive_judge_bar(&[2.0, 2.0, 2.0], 3.0).unwrap(), 2.0);
        assert_eq!(adaptive_judge_bar(&[], 0.0), Err(FilterError::EmptyScoreSet));
    }

    #[test]
    fn filter_examples() {
        let v = worked_vector();
        let split = filter_documents(&v, 3.0);
        assert_eq!(ids(&order_documents(&split.kept, OrderMode::Descending)), ["d3", "d1"]);
        assert_eq!(ids(&split.dropped), ["d2"]);
        let split = filter_documents(&v, 3.5);
        assert_eq!(ids(&order_documents(&split.kept, OrderMode::Descending)), ["d3", "d1"]);
        let flat = vec![ScoredDocument::new("a", 1, 2.0), ScoredDocument::new("b", 2, 2.0)];
        let split = filter_documents(&flat, 2.0);
        assert_eq!(split.kept.len(), 2);
        assert!(split.dropped.is_empty());
    }

    #[test]
    fn ordering_examples() {
        let v = worked_vector();
        assert_eq!(ids(&order_documents(&v, OrderMode::Descending)), ["d3", "d1", "d2"]);
        assert_eq!(ids(&order_documents(&v, OrderMode::Ascending)), ["d2", "d1", "d3"]);
        let tie = vec![ScoredDocument::new("late", 5, 1.0), ScoredDocument::new("early", 2, 1.0)];
        assert_eq!(ids(&order_documents(&tie, OrderMode::Descending)), ["early", "late"]);
        assert_eq!(ids(&order_documents(&tie, OrderMode::Ascending)), ["early", "late"]);
        let many: Vec<_> = (1..=10).map(|i| ScoredDocument::new(format!("d{i}"), i, i as f64)).collect();
        let a = order_documents(&many, OrderMode::Random { seed: 7 });
        let b = order_documents(&many, OrderMode::Random { seed: 7 });
        assert_eq!(a, b);
        let mut reversed = many.clone();
        reversed.reverse();
        assert_eq!(order_documents(&reversed, OrderMode::Random { seed: 7 }), a);
    }

    #[test]
    fn order_kind_requires_seed_for_random() {
        assert_eq!(OrderKind::Random.with_seed(None), Err(FilterError::MissingSeed));
        assert_eq!(OrderKind::Random.with_seed(Some(3)), Ok(OrderMode::Random { seed: 3 }));
        assert_eq!(OrderKind::Ascending.with_seed(None), Ok(OrderMode::Ascending));
    }

    #[test]
    fn apply_filter_outcome() {
        let v = worked_vector();
        let out = apply_filter(&v, 0.0, OrderMode::Descending).unwrap();
        assert_eq!(out.kept_ids(), ["d3", "d1"]);
        assert_eq!(out.dropped.len(), 1);
        out.validate(["d1", "d2", "d3"]).unwrap();
        let relaxed = apply_filter(&v, 1.0, OrderMode::Descending).unwrap();
        assert_eq!(relaxed.kept_ids(), ["d3", "d1"]);
        let wide = apply_filter(&v, 1.5, OrderMode::Descending).unwrap();
        assert_eq!(wide.kept_ids(), ["d3", "d1", "d2"]);
    }

    #[test]
    fn ojb_examples() {
        use LabeledScore as L;
        let sep = optimal_judge_bar(&[L::relevant(4.0), L::relevant(4.5), L::noisy(2.0), L::noisy(3.0)]).unwrap();
        assert_eq!((sep.threshold, sep.separable, sep.f1), (3.5, true, 1.0));
        let sym = optimal_judge_bar(&[L::relevant(5.0), L::noisy(1.0)]).unwrap();
        assert_eq!((sym.threshold, sym.separable), (3.0, true));
        // keeping everything (t <= 3) gives F1 2/3; any t above 3 keeps no relevant doc.
        let inv = optimal_judge_bar(&[L::relevant(3.0), L::noisy(4.0)]).unwrap();
        assert!(!inv.separable);
        assert_eq!(inv.threshold, 3.0);
        assert!((inv.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(optimal_judge_bar(&[L::relevant(1.0)]), Err(FilterError::DegenerateLabels));
        assert_eq!(optimal_judge_bar(&[]), Err(FilterError::DegenerateLabels));
    }

    #[test]
    fn histogram_examples() {
        assert_eq!(score_histogram(&[1.0, 1.0, 1.0], 1, None).unwrap().counts, [3]);
        let h = score_histogram(&[0.0, 10.0], 2, Some((0.0, 10.0))).unwrap();
        assert_eq!(h.counts, [1, 1]);
        assert_eq!(h.edges(), [0.0, 5.0, 10.0]);
        assert_eq!(score_histogram(&[0.0], 2, Some((1.0, 1.0))), Err(FilterError::BadRange(1.0, 1.0)));
        assert_eq!(score_histogram(&[0.0], 0, None), Err(FilterError::ZeroBins));
        let h = score_histogram(&[-1.0, 0.5, 3.0], 2, Some((0.0, 1.0))).unwrap();
        assert_eq!((h.underflow, h.counts.clone(), h.overflow), (1, vec![0, 1], 1));
        assert_eq!(
            score_histogram(&[0.0, 10.0], 2, None).unwrap().to_csv(),
            "bin_lo,bin_hi,count\n0,5,1\n5,10,1\n"
        );
    }

    proptest! {
        #[test]
        fn histogram_conserves_counts(v in prop::collection::vec(-50.0f64..50.0, 1..60), bins in 1usize..12) {
            let h = score_histogram(&v, bins, None).unwrap();
            prop_assert_eq!(h.counts.iter().sum::<u64>(), v.len() as u64);
            prop_assert_eq!(h.total(), v.len() as u64);
        }

        #[test]
        fn swapped_labels_negate_verdict_score(y in -50.0f64..0.0, n in -50.0f64..0.0) {
            let v = JudgeVerdict::new("d", y, n, Default::default());
            let w = JudgeVerdict::new("d", n, y, Default::default());
            prop_assert_eq!(v.relevance_score, -w.relevance_score);
        }
    }
}
