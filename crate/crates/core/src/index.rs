//! Exact brute-force corpus index with forward, backward and batched
//! retrieval, plus an optional dense pairwise-similarity cache.
//!
//! Documents are kept sorted by id, so the position of a document doubles as
//! its tie-break key and insertion order never leaks into a result.
//!
//! Document-to-document scores are always rounded to the storage scalar `T`.
//! The pairwise cache holds `T` entries, and the uncached path rounds the same
//! way, so the two backward paths return identical lists.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use rayon::prelude::*;

use crate::error::{BirdError, Result};
use crate::scalar::Scalar;
use crate::types::{
    check_vector, combine, dot, norm, EmbeddedDocument, Pivot, Query, RankedEntry, RankedList,
    SimilarityMetric,
};

/// One gibibyte, the default cache budget.
pub const DEFAULT_CACHE_BUDGET_BYTES: u128 = 1 << 30;

/// Snapshot of the retrieval counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RetrievalStats {
    pub forward_passes: u64,
    pub backward_passes: u64,
    /// Vector similarity evaluations performed at retrieval time.
    pub similarity_evaluations: u64,
    /// Backward passes answered from the pairwise cache.
    pub cached_backward_passes: u64,
}

#[derive(Debug, Default)]
struct Counters {
    forward_passes: AtomicU64,
    backward_passes: AtomicU64,
    similarity_evaluations: AtomicU64,
    cached_backward_passes: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> RetrievalStats {
        RetrievalStats {
            forward_passes: self.forward_passes.load(AtomicOrdering::Relaxed),
            backward_passes: self.backward_passes.load(AtomicOrdering::Relaxed),
            similarity_evaluations: self.similarity_evaluations.load(AtomicOrdering::Relaxed),
            cached_backward_passes: self.cached_backward_passes.load(AtomicOrdering::Relaxed),
        }
    }

    fn reset(&self) {
        self.forward_passes.store(0, AtomicOrdering::Relaxed);
        self.backward_passes.store(0, AtomicOrdering::Relaxed);
        self.similarity_evaluations.store(0, AtomicOrdering::Relaxed);
        self.cached_backward_passes.store(0, AtomicOrdering::Relaxed);
    }
}

/// Dense symmetric N×N matrix of document similarities in id order.
#[derive(Clone, Debug)]
pub struct PairwiseCache<T> {
    n: usize,
    values: Vec<T>,
}

impl<T: Scalar> PairwiseCache<T> {
    /// Bytes needed to cache `n` documents.
    pub fn required_bytes(n: usize) -> u128 {
        (n as u128) * (n as u128) * std::mem::size_of::<T>() as u128
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Immutable, id-addressable corpus.
#[derive(Debug)]
pub struct CorpusIndex<T = f32> {
    documents: Vec<EmbeddedDocument<T>>,
    positions: HashMap<String, usize>,
    norms: Vec<f64>,
    dimension: usize,
    metric: SimilarityMetric,
    cache: Option<PairwiseCache<T>>,
    counters: Counters,
}

impl<T: Scalar> Clone for CorpusIndex<T> {
    /// Clones share no counters; the copy starts from zero.
    fn clone(&self) -> Self {
        Self {
            documents: self.documents.clone(),
            positions: self.positions.clone(),
            norms: self.norms.clone(),
            dimension: self.dimension,
            metric: self.metric,
            cache: self.cache.clone(),
            counters: Counters::default(),
        }
    }
}

impl<T: Scalar> CorpusIndex<T> {
    /// Validates and indexes `docs`. Errors list every offending id.
    pub fn build(docs: Vec<EmbeddedDocument<T>>, metric: SimilarityMetric) -> Result<Self> {
        let Some(first) = docs.first() else {
            return Err(BirdError::Build("corpus is empty".into()));
        };
        let dimension = first.dimension();
        if dimension == 0 {
            return Err(BirdError::Build("documents have zero dimension".into()));
        }

        let mut seen = HashSet::with_capacity(docs.len());
        let mut duplicates: Vec<String> = Vec::new();
        let mut bad: Vec<String> = Vec::new();
        for d in &docs {
            if !seen.insert(d.id.as_str()) && !duplicates.contains(&d.id) {
                duplicates.push(d.id.clone());
            }
            if let Err(e) = check_vector(&format!("document {}", d.id), &d.vector, dimension, metric) {
                bad.push(e.to_string());
            }
        }
        if !duplicates.is_empty() {
            duplicates.sort();
            return Err(BirdError::DuplicateIds(duplicates));
        }
        if !bad.is_empty() {
            return Err(BirdError::Build(bad.join("; ")));
        }

        let mut documents = docs;
        documents.sort_by(|a, b| a.id.cmp(&b.id));
        let positions = documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
        let norms = documents.iter().map(|d| norm(&d.vector)).collect();
        Ok(Self {
            documents,
            positions,
            norms,
            dimension,
            metric,
            cache: None,
            counters: Counters::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn metric(&self) -> SimilarityMetric {
        self.metric
    }

    /// Documents in ascending id order.
    pub fn documents(&self) -> &[EmbeddedDocument<T>] {
        &self.documents
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddedDocument<T>> {
        self.positions.get(id).map(|&i| &self.documents[i])
    }

    pub fn pairwise_cache(&self) -> Option<&PairwiseCache<T>> {
        self.cache.as_ref()
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn stats(&self) -> RetrievalStats {
        self.counters.snapshot()
    }

    pub fn reset_stats(&self) {
        self.counters.reset();
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.positions
            .get(id)
            .copied()
            .ok_or_else(|| BirdError::NotFound(id.to_string()))
    }

    #[inline]
    fn doc_similarity(&self, i: usize, j: usize) -> T {
        let d = dot(&self.documents[i].vector, &self.documents[j].vector);
        T::narrow(combine(self.metric, d, self.norms[i], self.norms[j]))
    }

    /// Top-k documents for a query, ties broken by ascending id.
    pub fn forward_retrieve(&self, query: &Query<T>, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(BirdError::invalid("k must be positive"));
        }
        check_vector(&format!("query {}", query.id), &query.vector, self.dimension, self.metric)?;
        let qnorm = norm(&query.vector);
        let scores: Vec<f64> = self
            .documents
            .iter()
            .zip(&self.norms)
            .map(|(d, &dn)| combine(self.metric, dot(&query.vector, &d.vector), qnorm, dn))
            .collect();
        self.counters.forward_passes.fetch_add(1, AtomicOrdering::Relaxed);
        self.counters
            .similarity_evaluations
            .fetch_add(self.len() as u64, AtomicOrdering::Relaxed);
        Ok(self.ranked(Pivot::Query(query.id.clone()), &scores, k, None))
    }

    /// Top-k neighbours of an indexed document, the document itself excluded.
    pub fn backward_retrieve(&self, pivot_doc_id: &str, k: usize) -> Result<RankedList> {
        if k == 0 {
            return Err(BirdError::invalid("k must be positive"));
        }
        let p = self.position(pivot_doc_id)?;
        let scores: Vec<f64> = match &self.cache {
            Some(cache) => {
                self.counters
                    .cached_backward_passes
                    .fetch_add(1, AtomicOrdering::Relaxed);
                cache.row(p).iter().map(|v| v.widen()).collect()
            }
            None => {
                self.counters
                    .similarity_evaluations
                    .fetch_add(self.len().saturating_sub(1) as u64, AtomicOrdering::Relaxed);
                (0..self.len())
                    .map(|j| if j == p { 0.0 } else { self.doc_similarity(p, j).widen() })
                    .collect()
            }
        };
        self.counters.backward_passes.fetch_add(1, AtomicOrdering::Relaxed);
        Ok(self.ranked(Pivot::Document(pivot_doc_id.to_string()), &scores, k, Some(p)))
    }

    /// One backward list per forward entry, in forward order.
    pub fn batch_backward(&self, forward: &RankedList, k: usize) -> Result<Vec<RankedList>> {
        forward
            .entries()
            .par_iter()
            .map(|e| self.backward_retrieve(&e.doc_id, k))
            .collect()
    }

    /// Attaches the dense pairwise cache, refusing if it would exceed `budget_bytes`.
    pub fn precompute_pairwise(mut self, budget_bytes: u128) -> Result<Self> {
        let n = self.len();
        let required = PairwiseCache::<T>::required_bytes(n);
        if required > budget_bytes {
            return Err(BirdError::BudgetExceeded {
                required,
                budget: budget_bytes,
            });
        }
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| (0..n).map(|j| self.doc_similarity(i, j)).collect())
            .collect();
        self.cache = Some(PairwiseCache {
            n,
            values: rows.into_iter().flatten().collect(),
        });
        Ok(self)
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    fn ranked(&self, pivot: Pivot, scores: &[f64], k: usize, exclude: Option<usize>) -> RankedList {
        let order = top_k_positions(scores, k, exclude);
        let entries = order
            .into_iter()
            .map(|i| RankedEntry {
                doc_id: self.documents[i].id.clone(),
                score: scores[i],
            })
            .collect();
        RankedList::from_sorted(pivot, entries)
    }
}

#[inline]
fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Positions of the `k` best scores: descending score, then ascending position.
fn top_k_positions(scores: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| Some(i) != exclude).collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

/// Ranks arbitrary `(id, score)` candidates with the index's ordering rule.
pub fn rank_by_scores(pivot: Pivot, candidates: &[(String, f64)], k: usize) -> RankedList {
    let mut sorted: Vec<&(String, f64)> = candidates
        .iter()
        .filter(|(id, _)| !matches!(&pivot, Pivot::Document(p) if p == id))
        .collect();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted.truncate(k);
    let entries = sorted
        .into_iter()
        .map(|(id, s)| RankedEntry {
            doc_id: id.clone(),
            score: *s,
        })
        .collect();
    RankedList::from_sorted(pivot, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::similarity;

    fn doc(id: &str, v: &[f32]) -> EmbeddedDocument<f32> {
        EmbeddedDocument::benign(id, v.to_vec())
    }

    fn three() -> CorpusIndex<f32> {
        CorpusIndex::build(
            vec![doc("d1", &[1.0, 0.1]), doc("d2", &[0.5, 0.8]), doc("d3", &[0.1, 1.0])],
            SimilarityMetric::DotProduct,
        )
        .unwrap()
    }

    #[test]
    fn build_reports_size() {
        assert_eq!(three().len(), 3);
    }

    #[test]
    fn build_names_duplicates() {
        let err = CorpusIndex::build(
            vec![doc("d1", &[1.0, 0.0]), doc("d2", &[0.0, 1.0]), doc("d1", &[1.0, 1.0])],
            SimilarityMetric::Cosine,
        )
        .unwrap_err();
        match err {
            BirdError::DuplicateIds(ids) => assert_eq!(ids, vec!["d1".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn build_rejects_ragged_dimensions() {
        let err = CorpusIndex::build(
            vec![doc("a", &[1.0, 0.0]), doc("b", &[1.0, 0.0, 0.0])],
            SimilarityMetric::Cosine,
        )
        .unwrap_err();
        assert!(err.to_string().contains("document b"), "{err}");
    }

    #[test]
    fn forward_picks_highest_scores() {
        // dot with q=[1,0]: d1 1.0, d2 0.5, d3 0.1
        let index = three();
        let fw = index.forward_retrieve(&Query::new("q", vec![1.0, 0.0]), 2).unwrap();
        assert_eq!(fw.ids().collect::<Vec<_>>(), vec!["d1", "d2"]);
    }

    #[test]
    fn forward_truncates_to_corpus() {
        let fw = three().forward_retrieve(&Query::new("q", vec![1.0, 0.0]), 10).unwrap();
        assert_eq!(fw.len(), 3);
    }

    #[test]
    fn forward_rejects_zero_k() {
        assert!(three().forward_retrieve(&Query::new("q", vec![1.0, 0.0]), 0).is_err());
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let err = three().forward_retrieve(&Query::new("q", vec![1.0]), 1).unwrap_err();
        assert!(matches!(err, BirdError::DimensionMismatch { .. }));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let index = CorpusIndex::build(
            vec![doc("zeta", &[0.6, 0.8]), doc("alpha", &[0.6, 0.8]), doc("mid", &[0.0, 1.0])],
            SimilarityMetric::Cosine,
        )
        .unwrap();
        let fw = index.forward_retrieve(&Query::new("q", vec![1.0, 0.0]), 3).unwrap();
        assert_eq!(fw.ids().collect::<Vec<_>>(), vec!["alpha", "zeta", "mid"]);
    }

    #[test]
    fn backward_excludes_pivot() {
        let bw = three().backward_retrieve("d1", 3).unwrap();
        assert_eq!(bw.len(), 2);
        assert!(bw.ids().all(|id| id != "d1"));
        assert_eq!(bw.pivot(), &Pivot::Document("d1".into()));
    }

    #[test]
    fn backward_unknown_pivot() {
        assert!(matches!(three().backward_retrieve("nope", 3), Err(BirdError::NotFound(_))));
    }

    #[test]
    fn cache_is_transparent() {
        let plain = three();
        let cached = three().precompute_pairwise(DEFAULT_CACHE_BUDGET_BYTES).unwrap();
        for id in ["d1", "d2", "d3"] {
            assert_eq!(plain.backward_retrieve(id, 3).unwrap(), cached.backward_retrieve(id, 3).unwrap());
        }
    }

    #[test]
    fn cache_shape_and_symmetry() {
        let index = three().precompute_pairwise(DEFAULT_CACHE_BUDGET_BYTES).unwrap();
        let cache = index.pairwise_cache().unwrap();
        assert_eq!(cache.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(cache.get(i, j), cache.get(j, i));
                let direct = similarity(
                    &index.documents()[i].vector,
                    &index.documents()[j].vector,
                    SimilarityMetric::DotProduct,
                )
                .unwrap();
                assert!((cache.get(i, j) as f64 - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn budget_refusal_reports_bytes() {
        assert_eq!(PairwiseCache::<f32>::required_bytes(100_000), 40_000_000_000);
        let err = three().precompute_pairwise(8).unwrap_err();
        match err {
            BirdError::BudgetExceeded { required, budget } => {
                assert_eq!(required, 36);
                assert_eq!(budget, 8);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn counters_track_passes() {
        let index = three();
        let fw = index.forward_retrieve(&Query::new("q", vec![1.0, 0.0]), 3).unwrap();
        index.batch_backward(&fw, 3).unwrap();
        let s = index.stats();
        assert_eq!(s.forward_passes, 1);
        assert_eq!(s.backward_passes, 3);
        assert_eq!(s.similarity_evaluations, 3 + 3 * 2);
        index.reset_stats();
        assert_eq!(index.stats(), RetrievalStats::default());
    }

    #[test]
    fn rank_by_scores_matches_index_rule() {
        let candidates = vec![("b".to_string(), 0.5), ("a".to_string(), 0.5), ("c".to_string(), 0.9)];
        let list = rank_by_scores(Pivot::Document("c".into()), &candidates, 5);
        assert_eq!(list.ids().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn insertion_order_is_irrelevant() {
        let a = three();
        let b = CorpusIndex::build(
            vec![doc("d3", &[0.1, 1.0]), doc("d1", &[1.0, 0.1]), doc("d2", &[0.5, 0.8])],
            SimilarityMetric::DotProduct,
        )
        .unwrap();
        let q = Query::new("q", vec![0.3f32, 0.7]);
        assert_eq!(a.forward_retrieve(&q, 3).unwrap(), b.forward_retrieve(&q, 3).unwrap());
        assert_eq!(a.backward_retrieve("d2", 3).unwrap(), b.backward_retrieve("d2", 3).unwrap());
    }
}
