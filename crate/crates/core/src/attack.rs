//! Synthetic poisoned corpora.
//!
//! Benign documents are isotropic unit vectors. Each poison for a query is
//! `normalize(pull * q + (1 - pull) * u + tightness * n)`, where `u` is a
//! random unit direction shared by all poisons of that query and `n` is a
//! fresh random unit direction per poison. This yields one tight cluster next
//! to each target query.
//!
//! Every random draw comes from a ChaCha stream keyed by the seed, so a scenario
//! is a pure function of its configuration.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::index::{CorpusIndex, DEFAULT_CACHE_BUDGET_BYTES};
use crate::scalar::Scalar;
use crate::types::{similarity, EmbeddedDocument, Label, Query, SimilarityMetric};

/// Benign documents kept per query in a pilot subset.
pub const PILOT_BENIGN_COUNT: usize = 20;

const BENIGN_STREAM: u64 = 1;
const QUERY_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Poisons per target query.
    pub m: usize,
    /// Length of the per-poison random offset.
    pub poison_tightness: f64,
    /// Interpolation weight toward the query.
    pub poison_pull: f64,
    /// Standard deviation of benign components before normalisation.
    pub benign_dispersion: f64,
    pub dimension: usize,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            m: 5,
            poison_tightness: 0.05,
            poison_pull: 0.9,
            benign_dispersion: 1.0,
            dimension: 64,
            seed: 42,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension == 0 {
            return Err(BirdError::invalid("dimension must be positive"));
        }
        if !(self.poison_tightness >= 0.0) {
            return Err(BirdError::invalid("poison tightness must be non-negative"));
        }
        if !(self.benign_dispersion > 0.0) {
            return Err(BirdError::invalid("benign dispersion must be positive"));
        }
        if !(self.poison_tightness < self.benign_dispersion) {
            return Err(BirdError::invalid(
                "poison tightness must be smaller than benign dispersion",
            ));
        }
        if !(self.poison_pull > 0.0 && self.poison_pull <= 1.0) {
            return Err(BirdError::invalid("poison pull must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Size of a generated scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub n_queries: usize,
    pub n_benign: usize,
    pub metric: SimilarityMetric,
    pub attack: AttackConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_queries: 100,
            n_benign: 150,
            metric: SimilarityMetric::Cosine,
            attack: AttackConfig::default(),
        }
    }
}

/// Queries plus a labelled corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario<T = f32> {
    pub dimension: usize,
    pub metric: SimilarityMetric,
    pub queries: Vec<Query<T>>,
    pub corpus: Vec<EmbeddedDocument<T>>,
    /// Query id to the id of its ground-truth benign document.
    pub gold_map: BTreeMap<String, String>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// FNV-1a; stable across platforms and releases, unlike std's hasher.
fn stream_for_id(id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h | (1 << 63)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, dim, sigma);
        if v.iter().any(|x| *x != 0.0) {
            normalize(&mut v);
            return v;
        }
    }
}

fn narrow_all<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::narrow(x)).collect()
}

/// `n` isotropic unit vectors labelled benign, ids `b00000`, `b00001`, ...
pub fn generate_benign<T: Scalar>(n: usize, cfg: &AttackConfig) -> Result<Vec<EmbeddedDocument<T>>> {
    cfg.validate()?;
    if n == 0 {
        return Err(BirdError::invalid("need at least one benign document"));
    }
    let mut rng = rng_for(cfg.seed, BENIGN_STREAM);
    Ok((0..n)
        .map(|i| {
            let v = random_unit(&mut rng, cfg.dimension, cfg.benign_dispersion);
            EmbeddedDocument::benign(format!("b{i:05}"), narrow_all(&v))
        })
        .collect())
}

/// `n` isotropic unit query vectors, ids `q0000`, `q0001`, ...
pub fn generate_queries<T: Scalar>(n: usize, cfg: &AttackConfig) -> Result<Vec<Query<T>>> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, QUERY_STREAM);
    Ok((0..n)
        .map(|i| Query::new(format!("q{i:04}"), narrow_all(&random_unit(&mut rng, cfg.dimension, 1.0))))
        .collect())
}

/// The `m` poisons crafted against `query`, ids `<query>-p<j>`.
pub fn generate_poisons<T: Scalar>(query: &Query<T>, cfg: &AttackConfig) -> Result<Vec<EmbeddedDocument<T>>> {
    cfg.validate()?;
    crate::types::check_vector(
        &format!("query {}", query.id),
        &query.vector,
        cfg.dimension,
        SimilarityMetric::Cosine,
    )?;
    let mut rng = rng_for(cfg.seed, stream_for_id(&query.id));
    let mut q: Vec<f64> = query.vector.iter().map(|x| x.widen()).collect();
    normalize(&mut q);
    let shared = random_unit(&mut rng, cfg.dimension, 1.0);
    let alpha = cfg.poison_pull;
    Ok((0..cfg.m)
        .map(|j| {
            let noise = random_unit(&mut rng, cfg.dimension, 1.0);
            let mut v: Vec<f64> = (0..cfg.dimension)
                .map(|i| alpha * q[i] + (1.0 - alpha) * shared[i] + cfg.poison_tightness * noise[i])
                .collect();
            normalize(&mut v);
            EmbeddedDocument::poison(format!("{}-p{j}", query.id), narrow_all(&v), query.id.clone())
        })
        .collect())
}

/// Union of benign and poisoned documents; ids must not collide.
pub fn inject<T: Scalar>(
    benign: Vec<EmbeddedDocument<T>>,
    poisons: Vec<EmbeddedDocument<T>>,
) -> Result<Vec<EmbeddedDocument<T>>> {
    let ids: HashSet<&str> = benign.iter().map(|d| d.id.as_str()).collect();
    let mut collisions: Vec<String> = poisons
        .iter()
        .filter(|p| ids.contains(p.id.as_str()))
        .map(|p| p.id.clone())
        .collect();
    if !collisions.is_empty() {
        collisions.sort();
        collisions.dedup();
        return Err(BirdError::DuplicateIds(collisions));
    }
    let mut corpus = benign;
    corpus.extend(poisons);
    Ok(corpus)
}

/// The `count` benign documents most similar to `query`, best first.
pub fn top_benign<'a, T: Scalar>(
    query: &Query<T>,
    corpus: &'a [EmbeddedDocument<T>],
    count: usize,
    metric: SimilarityMetric,
) -> Result<Vec<&'a EmbeddedDocument<T>>> {
    let mut scored = Vec::new();
    for d in corpus.iter().filter(|d| d.label == Label::Benign) {
        scored.push((similarity(&query.vector, &d.vector, metric)?, d));
    }
    if scored.len() < count {
        return Err(BirdError::invalid(format!(
            "pilot subset needs {count} benign documents, corpus has {}",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(scored.into_iter().take(count).map(|(_, d)| d).collect())
}

/// Pilot subset for one query: its 20 most similar benign documents plus
/// `cfg.m` freshly generated poisons.
pub fn build_pilot_subset<T: Scalar>(
    query: &Query<T>,
    full_corpus: &[EmbeddedDocument<T>],
    cfg: &AttackConfig,
    metric: SimilarityMetric,
) -> Result<Vec<EmbeddedDocument<T>>> {
    let benign = top_benign(query, full_corpus, PILOT_BENIGN_COUNT, metric)?
        .into_iter()
        .cloned()
        .collect();
    inject(benign, generate_poisons(query, cfg)?)
}

/// Builds the default-style scenario: a shared benign pool, `m` poisons per
/// query, and the most relevant benign document of each query marked gold.
pub fn generate_scenario<T: Scalar>(cfg: &ScenarioConfig) -> Result<Scenario<T>> {
    let attack = &cfg.attack;
    attack.validate()?;
    if cfg.n_queries == 0 {
        return Err(BirdError::invalid("need at least one query"));
    }
    let mut benign = generate_benign::<T>(cfg.n_benign, attack)?;
    let mut queries = generate_queries::<T>(cfg.n_queries, attack)?;
    let mut poisons = Vec::with_capacity(cfg.n_queries * attack.m);
    let mut gold_map = BTreeMap::new();
    for q in &mut queries {
        let ps = generate_poisons(q, attack)?;
        if !ps.is_empty() {
            q.target_answer_doc_ids = Some(ps.iter().map(|p| p.id.clone()).collect());
        }
        poisons.extend(ps);
        let gold = top_benign(q, &benign, 1, cfg.metric)?[0].id.clone();
        gold_map.insert(q.id.clone(), gold);
    }
    let gold_ids: HashSet<&String> = gold_map.values().collect();
    for d in &mut benign {
        d.gold = gold_ids.contains(&d.id);
    }
    let scenario = Scenario {
        dimension: attack.dimension,
        metric: cfg.metric,
        queries,
        corpus: inject(benign, poisons)?,
        gold_map,
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Where each query's retrieval runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexScope {
    /// Per-query subset: top 20 benign documents plus that query's poisons.
    #[default]
    Pilot,
    /// Every query searches the whole corpus.
    Full,
}

impl std::fmt::Display for IndexScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndexScope::Pilot => "pilot",
            IndexScope::Full => "full",
        })
    }
}

impl std::str::FromStr for IndexScope {
    type Err = BirdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pilot" => Ok(IndexScope::Pilot),
            "full" => Ok(IndexScope::Full),
            other => Err(BirdError::invalid(format!("unknown scope {other:?}; expected pilot or full"))),
        }
    }
}

/// A query together with the index it is evaluated against.
#[derive(Clone, Debug)]
pub struct QueryView<T = f32> {
    pub query: Query<T>,
    pub index: Arc<CorpusIndex<T>>,
}

impl<T: Scalar> Scenario<T> {
    pub fn validate(&self) -> Result<()> {
        let query_ids: HashSet<&str> = self.queries.iter().map(|q| q.id.as_str()).collect();
        if query_ids.len() != self.queries.len() {
            return Err(BirdError::invalid("query ids are not unique"));
        }
        for q in &self.queries {
            crate::types::check_vector(&format!("query {}", q.id), &q.vector, self.dimension, self.metric)?;
        }
        let mut doc_ids = HashSet::with_capacity(self.corpus.len());
        let mut per_target: HashMap<&str, usize> = HashMap::new();
        for d in &self.corpus {
            if !doc_ids.insert(d.id.as_str()) {
                return Err(BirdError::DuplicateIds(vec![d.id.clone()]));
            }
            crate::types::check_vector(&format!("document {}", d.id), &d.vector, self.dimension, self.metric)?;
            if d.label == Label::Poison {
                let target = d.target_query_id.as_deref().ok_or_else(|| {
                    BirdError::invalid(format!("poison {} has no target query", d.id))
                })?;
                if !query_ids.contains(target) {
                    return Err(BirdError::invalid(format!(
                        "poison {} targets unknown query {target}",
                        d.id
                    )));
                }
                *per_target.entry(target).or_default() += 1;
            }
        }
        let counts: HashSet<usize> = per_target.values().copied().collect();
        if counts.len() > 1 {
            return Err(BirdError::invalid("target queries carry differing numbers of poisons"));
        }
        for (q, g) in &self.gold_map {
            if !query_ids.contains(q.as_str()) {
                return Err(BirdError::invalid(format!("gold entry for unknown query {q}")));
            }
            if !doc_ids.contains(g.as_str()) {
                return Err(BirdError::invalid(format!("gold document {g} is not in the corpus")));
            }
        }
        Ok(())
    }

    pub fn label_of(&self, doc_id: &str) -> Option<Label> {
        self.corpus.iter().find(|d| d.id == doc_id).map(|d| d.label)
    }

    /// Poisons per target query (0 for a benign-only scenario).
    pub fn poisons_per_query(&self) -> usize {
        let mut per_target: HashMap<&str, usize> = HashMap::new();
        for d in self.corpus.iter().filter(|d| d.label == Label::Poison) {
            if let Some(t) = d.target_query_id.as_deref() {
                *per_target.entry(t).or_default() += 1;
            }
        }
        per_target.values().copied().max().unwrap_or(0)
    }

    /// Copy keeping only the first `m` poisons (by id) of every target query.
    pub fn with_poison_budget(&self, m: usize) -> Result<Self> {
        let available = self.poisons_per_query();
        if m > available {
            return Err(BirdError::invalid(format!(
                "scenario carries {available} poisons per query, cannot keep {m}"
            )));
        }
        let mut by_target: HashMap<&str, Vec<&str>> = HashMap::new();
        for d in self.corpus.iter().filter(|d| d.label == Label::Poison) {
            by_target.entry(d.target_query_id.as_deref().unwrap_or("")).or_default().push(&d.id);
        }
        let mut keep: HashSet<&str> = HashSet::new();
        for ids in by_target.values_mut() {
            ids.sort_unstable();
            keep.extend(ids.iter().take(m));
        }
        let corpus: Vec<_> = self
            .corpus
            .iter()
            .filter(|d| d.label == Label::Benign || keep.contains(d.id.as_str()))
            .cloned()
            .collect();
        let queries = self
            .queries
            .iter()
            .cloned()
            .map(|mut q| {
                if let Some(ids) = q.target_answer_doc_ids.as_mut() {
                    ids.retain(|id| keep.contains(id.as_str()));
                    if ids.is_empty() {
                        q.target_answer_doc_ids = None;
                    }
                }
                q
            })
            .collect();
        Ok(Self {
            dimension: self.dimension,
            metric: self.metric,
            queries,
            corpus,
            gold_map: self.gold_map.clone(),
        })
    }

    /// Pilot subset documents for `query`, taken from this corpus.
    pub fn pilot_documents(&self, query: &Query<T>) -> Result<Vec<EmbeddedDocument<T>>> {
        let benign = top_benign(query, &self.corpus, PILOT_BENIGN_COUNT, self.metric)?
            .into_iter()
            .cloned()
            .collect();
        let poisons = self
            .corpus
            .iter()
            .filter(|d| d.label == Label::Poison && d.target_query_id.as_deref() == Some(query.id.as_str()))
            .cloned()
            .collect();
        inject(benign, poisons)
    }

    /// One [`QueryView`] per query, in scenario order.
    pub fn views(&self, scope: IndexScope, cached: bool) -> Result<Vec<QueryView<T>>> {
        if self.queries.is_empty() {
            return Err(BirdError::EmptyScenario("scenario has no queries".into()));
        }
        let finish = |index: CorpusIndex<T>| -> Result<CorpusIndex<T>> {
            if cached {
                index.precompute_pairwise(DEFAULT_CACHE_BUDGET_BYTES)
            } else {
                Ok(index)
            }
        };
        match scope {
            IndexScope::Full => {
                let index = Arc::new(finish(CorpusIndex::build(self.corpus.clone(), self.metric)?)?);
                Ok(self
                    .queries
                    .iter()
                    .map(|q| QueryView {
                        query: q.clone(),
                        index: Arc::clone(&index),
                    })
                    .collect())
            }
            IndexScope::Pilot => self
                .queries
                .iter()
                .map(|q| {
                    let index = finish(CorpusIndex::build(self.pilot_documents(q)?, self.metric)?)?;
                    Ok(QueryView {
                        query: q.clone(),
                        index: Arc::new(index),
                    })
                })
                .collect(),
        }
    }
}
