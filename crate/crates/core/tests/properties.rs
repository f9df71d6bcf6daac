use std::collections::{HashMap, HashSet};
use std::sync::OnceLock;

use bird_core::analytics::scores_by_label;
use bird_core::attack::{IndexScope, ScenarioConfig};
use bird_core::index::rank_by_scores;
use bird_core::{
    composite_score, content_relevance, defend, defend_ablated, evaluate, generate_scenario, heatmap,
    proxy_metrics, score_distributions, similarity, spearman, sweep, AblationMode, AblationThresholds,
    CorpusIndex, DefaultScenario, DefenseConfig, DefenseResult, EmbeddedDocument, Label, Pivot, Query,
    RankedList, SimilarityMetric, SweepAxis, Verdict,
};
use proptest::prelude::*;

fn default_scenario() -> &'static DefaultScenario {
    static S: OnceLock<DefaultScenario> = OnceLock::new();
    S.get_or_init(|| generate_scenario(&ScenarioConfig::default()).unwrap())
}

fn default_results() -> &'static Vec<DefenseResult> {
    static R: OnceLock<Vec<DefenseResult>> = OnceLock::new();
    R.get_or_init(|| {
        let views = default_scenario().views(IndexScope::Pilot, true).unwrap();
        evaluate(&views, &DefenseConfig::default(), AblationMode::Composite, &AblationThresholds::default()).unwrap()
    })
}

// Small integer components make exact ties common.
fn corpus_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..5).prop_flat_map(|dim| {
        let vec = prop::collection::vec(-3i8..=3, dim)
            .prop_filter("non-zero", |v| v.iter().any(|&x| x != 0))
            .prop_map(|v| v.into_iter().map(f64::from).collect::<Vec<f64>>());
        (prop::collection::vec(vec.clone(), 1..30), vec)
    })
}

fn docs_from(vectors: &[Vec<f64>]) -> Vec<EmbeddedDocument<f64>> {
    // reverse insertion order so the index has to do the sorting
    vectors
        .iter()
        .enumerate()
        .rev()
        .map(|(i, v)| EmbeddedDocument::benign(format!("d{i:03}"), v.clone()))
        .collect()
}

fn oracle_top_k(pivot: &[f64], docs: &[EmbeddedDocument<f64>], exclude: Option<&str>, k: usize) -> Vec<String> {
    let mut scored: Vec<(String, f64)> = docs
        .iter()
        .filter(|d| Some(d.id.as_str()) != exclude)
        .map(|d| {
            let dot: f64 = pivot.iter().zip(&d.vector).map(|(a, b)| a * b).sum();
            let na = pivot.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = d.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d.id.clone(), (dot / (na * nb)).clamp(-1.0, 1.0))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(id, _)| id).collect()
}

fn list(ids: &[String]) -> RankedList {
    RankedList::from_ids(Pivot::Query("q".into()), ids.iter().cloned()).unwrap()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn spearman_oracle(fw: &[String], bw: &[String]) -> f64 {
    let common: Vec<&String> = fw.iter().filter(|id| bw.contains(id)).collect();
    if common.len() < 2 {
        return 0.0;
    }
    let bw_order: Vec<&String> = bw.iter().filter(|id| common.contains(id)).collect();
    let x: Vec<f64> = (1..=common.len()).map(|r| r as f64).collect();
    let y: Vec<f64> = common
        .iter()
        .map(|id| (bw_order.iter().position(|b| b == id).unwrap() + 1) as f64)
        .collect();
    pearson(&x, &y)
}

fn ranked_pair() -> impl Strategy<Value = (Vec<String>, Vec<String>)> {
    let universe: Vec<String> = (0..30).map(|i| format!("x{i:02}")).collect();
    (
        Just(universe.clone()).prop_shuffle(),
        Just(universe).prop_shuffle(),
        0usize..=20,
        0usize..=20,
    )
        .prop_map(|(a, b, la, lb)| (a[..la].to_vec(), b[..lb].to_vec()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn forward_matches_exhaustive_sort((vectors, q) in corpus_strategy(), k in 1usize..40) {
        let docs = docs_from(&vectors);
        let index = CorpusIndex::build(docs.clone(), SimilarityMetric::Cosine).unwrap();
        let got = index.forward_retrieve(&Query::new("q", q.clone()), k).unwrap();
        prop_assert_eq!(got.ids().map(str::to_string).collect::<Vec<_>>(), oracle_top_k(&q, &docs, None, k));
    }

    #[test]
    fn backward_matches_exhaustive_sort((vectors, _q) in corpus_strategy(), k in 1usize..40, pick in any::<prop::sample::Index>()) {
        let docs = docs_from(&vectors);
        let pivot = &docs[pick.index(docs.len())];
        for cached in [false, true] {
            let mut index = CorpusIndex::build(docs.clone(), SimilarityMetric::Cosine).unwrap();
            if cached {
                index = index.precompute_pairwise(1 << 24).unwrap();
            }
            let got = index.backward_retrieve(&pivot.id, k).unwrap();
            prop_assert!(got.position(&pivot.id).is_none());
            prop_assert_eq!(
                got.ids().map(str::to_string).collect::<Vec<_>>(),
                oracle_top_k(&pivot.vector, &docs, Some(&pivot.id), k)
            );
        }
    }

    #[test]
    fn batch_equals_sequential((vectors, q) in corpus_strategy(), k in 1usize..10) {
        let index = CorpusIndex::build(docs_from(&vectors), SimilarityMetric::Cosine).unwrap();
        let fw = index.forward_retrieve(&Query::new("q", q), k).unwrap();
        let batch = index.batch_backward(&fw, k).unwrap();
        prop_assert_eq!(batch.len(), fw.len());
        for (id, b) in fw.ids().zip(&batch) {
            prop_assert_eq!(b, &index.backward_retrieve(id, k).unwrap());
        }
    }

    #[test]
    fn spearman_equals_pearson_of_ranks((fw, bw) in ranked_pair()) {
        let got = spearman(&list(&fw), &list(&bw));
        prop_assert!((got - spearman_oracle(&fw, &bw)).abs() < 1e-9, "{got}");
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn ranking_invariant_under_monotone_transforms(raw in prop::collection::vec(-50i32..50, 1..25)) {
        let base: Vec<(String, f64)> = raw.iter().enumerate().map(|(i, &s)| (format!("d{i:02}"), f64::from(s) / 10.0)).collect();
        let k = base.len();
        let ids = |c: &[(String, f64)]| rank_by_scores(Pivot::Query("q".into()), c, k).ids().map(str::to_string).collect::<Vec<_>>();
        let reference = ids(&base);
        let affine: Vec<_> = base.iter().map(|(id, s)| (id.clone(), 2.0 * s + 1.0)).collect();
        let cubic: Vec<_> = base.iter().map(|(id, s)| (id.clone(), s.powi(3))).collect();
        prop_assert_eq!(&ids(&affine), &reference);
        prop_assert_eq!(&ids(&cubic), &reference);
        let other = list(&reference.iter().rev().cloned().collect::<Vec<_>>());
        let r = spearman(&list(&reference), &other);
        prop_assert_eq!(spearman(&list(&ids(&affine)), &other), r);
    }

    #[test]
    fn composite_is_monotone(r_cr in 0.0f64..1.0, a in -1.0f64..0.999, b in -1.0f64..0.999, bump in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(composite_score(r_cr, lo, 1e-9) <= composite_score(r_cr, hi, 1e-9));
        prop_assert!(composite_score(r_cr, lo, 1e-9) <= composite_score(r_cr + bump, lo, 1e-9));
        prop_assert!(composite_score(r_cr, lo, 1e-9).is_finite());
    }

    #[test]
    fn similarity_is_symmetric_and_bounded((vectors, q) in corpus_strategy()) {
        for v in &vectors {
            let ab = similarity(&q, v, SimilarityMetric::Cosine).unwrap();
            let ba = similarity(v, &q, SimilarityMetric::Cosine).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }
    }
}

#[test]
fn constructed_poison_relevance() {
    let q = Query::new("q", vec![0.6f64, 0.8, 0.0]);
    // unit vector orthogonal to q
    let perp = [0.8f64, -0.6, 0.0];
    let c = 0.98f64;
    let s = (1.0 - c * c).sqrt();
    let v: Vec<f64> = (0..3).map(|i| c * q.vector[i] + s * perp[i]).collect();
    let doc = EmbeddedDocument::poison("p", v, "q");
    assert!((content_relevance(&q, &doc, SimilarityMetric::Cosine).unwrap() - 0.98).abs() < 1e-6);
}

#[test]
fn defense_makes_one_forward_and_k_backward_passes() {
    let s = default_scenario();
    let view = &s.views(IndexScope::Pilot, false).unwrap()[0];
    view.index.reset_stats();
    defend(&view.index, &view.query, &DefenseConfig::default()).unwrap();
    let stats = view.index.stats();
    assert_eq!(stats.forward_passes, 1);
    assert_eq!(stats.backward_passes, 20);
    assert_eq!(stats.cached_backward_passes, 0);
    let n = view.index.len() as u64;
    assert_eq!(stats.similarity_evaluations, n + 20 * (n - 1));

    let cached = &s.views(IndexScope::Pilot, true).unwrap()[0];
    cached.index.reset_stats();
    defend(&cached.index, &cached.query, &DefenseConfig::default()).unwrap();
    let stats = cached.index.stats();
    assert_eq!((stats.forward_passes, stats.backward_passes, stats.cached_backward_passes), (1, 20, 20));
    assert_eq!(stats.similarity_evaluations, n);
}

#[test]
fn clean_sets_are_nested_in_epsilon() {
    let s = default_scenario();
    let views = s.views(IndexScope::Pilot, true).unwrap();
    for v in views.iter().take(30) {
        let mut previous: Option<HashSet<String>> = None;
        for eps in [0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 10.0, 1e9] {
            let config = DefenseConfig {
                epsilon: eps,
                ..Default::default()
            };
            let clean: HashSet<String> = defend(&v.index, &v.query, &config).unwrap().clean_ids.into_iter().collect();
            if let Some(p) = &previous {
                assert!(p.is_subset(&clean), "query {} at eps {eps}", v.query.id);
            }
            previous = Some(clean);
        }
    }
}

#[test]
fn poisons_lead_the_forward_ranking() {
    let s = default_scenario();
    let m = s.poisons_per_query();
    let views = s.views(IndexScope::Pilot, true).unwrap();
    let mut leading = 0;
    for v in &views {
        let fw = v.index.forward_retrieve(&v.query, 20).unwrap();
        leading += usize::from(fw.ids().take(m).all(|id| s.label_of(id) == Some(Label::Poison)));
    }
    assert!(leading as f64 >= 0.9 * views.len() as f64, "{leading} of {}", views.len());
}

#[test]
fn poison_backward_lists_start_with_siblings() {
    let s = default_scenario();
    let view = &s.views(IndexScope::Pilot, false).unwrap()[3];
    let poison = format!("{}-p0", view.query.id);
    let bw = view.index.backward_retrieve(&poison, 20).unwrap();
    let head: Vec<&str> = bw.ids().take(4).collect();
    assert!(head.iter().all(|id| s.label_of(id) == Some(Label::Poison)), "{head:?}");
}

#[test]
fn poisons_cluster_tighter_than_benign() {
    let s = default_scenario();
    let mean_pairwise = |docs: &[&EmbeddedDocument<f32>]| {
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..docs.len() {
            for j in (i + 1)..docs.len() {
                total += similarity(&docs[i].vector, &docs[j].vector, SimilarityMetric::Cosine).unwrap();
                n += 1;
            }
        }
        total / n as f64
    };
    let q = &s.queries[0];
    let poisons: Vec<_> = s.corpus.iter().filter(|d| d.target_query_id.as_deref() == Some(q.id.as_str())).collect();
    let benign: Vec<_> = s.corpus.iter().filter(|d| d.label == Label::Benign).take(50).collect();
    let tight = mean_pairwise(&poisons);
    assert!(tight >= 0.95, "{tight}");
    assert!(mean_pairwise(&benign).abs() < 0.1);
}

#[test]
fn default_defense_handles_every_slot() {
    for r in default_results() {
        // 5 poisons and 15 benign documents share the 20 forward slots
        assert_eq!(r.audit.filtered_poison, 5, "query {}", r.query_id);
        assert_eq!(r.audit.kept_poison, 0);
        let correct = r.audit.filtered_poison + r.audit.kept_benign;
        assert!(correct >= 16, "query {}: {correct} of 20 slots", r.query_id);
    }
}

#[test]
fn heatmap_cells_are_query_fractions() {
    let s = default_scenario();
    let views = s.views(IndexScope::Pilot, true).unwrap();
    let h = heatmap(&views, 20).unwrap();
    let n = views.len() as u64;
    assert_eq!(h.num_queries, views.len());
    assert!(h.forward_counts.iter().all(|&c| c <= n));
    assert!(h.backward_counts.iter().flatten().all(|&c| c <= n));
    // poisons occupy the first five forward ranks, so their own lists count them too
    assert_eq!(h.forward_counts.iter().sum::<u64>(), 5 * n);
}

#[test]
fn proxy_metrics_match_direct_counting() {
    let s = default_scenario();
    let views = s.views(IndexScope::Pilot, true).unwrap();
    let config = DefenseConfig {
        epsilon: 1.0,
        ..Default::default()
    };
    let results = evaluate(&views, &config, AblationMode::Composite, &AblationThresholds::default()).unwrap();
    let labels: HashMap<&str, Label> = s.corpus.iter().map(|d| (d.id.as_str(), d.label)).collect();
    let (mut leaks, mut gold, mut filtered, mut filtered_poison, mut poison_seen, mut benign_kept) = (0, 0, 0, 0, 0, 0);
    for r in &results {
        let kept: HashSet<&str> = r.clean_ids.iter().map(String::as_str).collect();
        leaks += usize::from(kept.iter().any(|id| labels[id] == Label::Poison));
        gold += usize::from(kept.contains(s.gold_map[&r.query_id].as_str()));
        benign_kept += kept.iter().filter(|id| labels[*id] == Label::Benign).count();
        for d in &r.scored {
            let poison = labels[d.doc_id.as_str()] == Label::Poison;
            poison_seen += usize::from(poison);
            if !kept.contains(d.doc_id.as_str()) {
                filtered += 1;
                filtered_poison += usize::from(poison);
            }
        }
    }
    let n = results.len() as f64;
    let m = proxy_metrics(&results, s).unwrap();
    assert_eq!(m.poison_leak_rate, leaks as f64 / n);
    assert_eq!(m.gold_retention, gold as f64 / n);
    assert_eq!(m.filter_precision, filtered_poison as f64 / filtered as f64);
    assert_eq!(m.filter_recall, filtered_poison as f64 / poison_seen as f64);
    assert_eq!(m.mean_benign_kept, benign_kept as f64 / n);
    assert!(m.gold_retention < 1.0, "epsilon 1.0 should cost some gold documents");
}

#[test]
fn epsilon_sweep_is_monotone() {
    let s = default_scenario();
    let values: Vec<f64> = (0..6).map(|i| 1.0 + 0.5 * f64::from(i)).collect();
    let rows = sweep(s, &DefenseConfig::default(), IndexScope::Pilot, &SweepAxis::Epsilon(values)).unwrap();
    assert_eq!(rows.len(), 6);
    for w in rows.windows(2) {
        assert!(w[0].metrics.poison_leak_rate <= w[1].metrics.poison_leak_rate);
        assert!(w[0].metrics.gold_retention <= w[1].metrics.gold_retention);
        assert!(w[0].metrics.mean_benign_kept <= w[1].metrics.mean_benign_kept);
    }
}

#[test]
fn poison_budget_sweep_includes_zero() {
    let s = default_scenario();
    let rows = sweep(s, &DefenseConfig::default(), IndexScope::Pilot, &SweepAxis::M(vec![0, 1, 3, 5])).unwrap();
    assert_eq!(rows[0].value, "0");
    assert_eq!(rows[0].metrics.poison_leak_rate, 0.0);
    assert_eq!(rows[0].metrics.filter_recall, 1.0);
    assert!(rows.iter().all(|r| r.metrics.num_queries == 100));
}

#[test]
fn composite_ablation_is_plain_defense() {
    let s = default_scenario();
    let views = s.views(IndexScope::Pilot, true).unwrap();
    let config = DefenseConfig::default();
    for v in views.iter().take(50) {
        let a = defend_ablated(&v.index, &v.query, &config, AblationMode::Composite, &AblationThresholds::default()).unwrap();
        assert_eq!(a, defend(&v.index, &v.query, &config).unwrap());
    }
}

#[test]
fn ablation_thresholds_apply_to_their_signal() {
    let s = default_scenario();
    let v = &s.views(IndexScope::Pilot, true).unwrap()[0];
    let t = AblationThresholds::default();
    let rel = defend_ablated(&v.index, &v.query, &DefenseConfig::default(), AblationMode::RelevanceOnly, &t).unwrap();
    for d in &rel.scored {
        assert_eq!(d.verdict == Verdict::Kept, d.r_cr <= 0.85);
    }
    let cc = defend_ablated(&v.index, &v.query, &DefenseConfig::default(), AblationMode::ConsistencyOnly, &t).unwrap();
    for d in &cc.scored {
        assert_eq!(d.verdict == Verdict::Kept, d.r_cc <= 0.85);
    }
}

#[test]
fn score_distributions_separate_labels() {
    let results = default_results();
    let summary = score_distributions(results);
    let (benign, poison) = scores_by_label(results);
    assert_eq!(summary.benign.total, benign.len());
    assert_eq!(summary.poison.total, poison.len());
    let benign_max = summary.benign.finite.unwrap().max;
    let poison_min = poison.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(poison_min > 2.5 && benign_max <= poison_min, "benign max {benign_max}, poison min {poison_min}");
}
