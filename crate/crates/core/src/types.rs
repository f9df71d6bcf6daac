//! Domain types shared by every stage: documents, queries, ranked lists and
//! the similarity primitive.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::scalar::Scalar;

/// Ground-truth provenance of a document.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Poison,
}

impl Label {
    pub fn is_poison(self) -> bool {
        matches!(self, Label::Poison)
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Poison => "poison",
        })
    }
}

/// A corpus document with its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedDocument<T = f32> {
    pub id: String,
    pub vector: Vec<T>,
    pub label: Label,
    /// Set when this document is the ground-truth answer for some query.
    pub gold: bool,
    /// The query a poisoned document was crafted against.
    pub target_query_id: Option<String>,
}

impl<T: Scalar> EmbeddedDocument<T> {
    pub fn benign(id: impl Into<String>, vector: Vec<T>) -> Self {
        Self {
            id: id.into(),
            vector,
            label: Label::Benign,
            gold: false,
            target_query_id: None,
        }
    }

    pub fn poison(id: impl Into<String>, vector: Vec<T>, target_query_id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            vector,
            label: Label::Poison,
            gold: false,
            target_query_id: Some(target_query_id.into()),
        }
    }

    pub fn dimension(&self) -> usize {
        self.vector.len()
    }
}

/// A user query with its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query<T = f32> {
    pub id: String,
    pub vector: Vec<T>,
    /// Documents carrying the attacker's target answer, when known.
    pub target_answer_doc_ids: Option<Vec<String>>,
}

impl<T: Scalar> Query<T> {
    pub fn new(id: impl Into<String>, vector: Vec<T>) -> Self {
        Self {
            id: id.into(),
            vector,
            target_answer_doc_ids: None,
        }
    }
}

/// What a ranked list was retrieved for.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum Pivot {
    Query(String),
    Document(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

/// An ordered top-k result, best first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pivot: Pivot,
    entries: Vec<RankedEntry>,
}

impl RankedList {
    /// Builds a list after checking ordering, distinctness and pivot exclusion.
    pub fn new(pivot: Pivot, entries: Vec<RankedEntry>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for pair in entries.windows(2) {
            if pair[1].score > pair[0].score {
                return Err(BirdError::invalid(format!(
                    "ranked list scores increase at {}",
                    pair[1].doc_id
                )));
            }
        }
        for e in &entries {
            if !seen.insert(e.doc_id.as_str()) {
                return Err(BirdError::invalid(format!("ranked list repeats {}", e.doc_id)));
            }
        }
        if let Pivot::Document(id) = &pivot {
            if seen.contains(id.as_str()) {
                return Err(BirdError::invalid(format!("ranked list contains its pivot {id}")));
            }
        }
        Ok(Self { pivot, entries })
    }

    /// Constructor for internally produced lists that already satisfy the invariants.
    pub(crate) fn from_sorted(pivot: Pivot, entries: Vec<RankedEntry>) -> Self {
        debug_assert!(entries.windows(2).all(|w| w[0].score >= w[1].score));
        Self { pivot, entries }
    }

    /// A list with synthetic descending scores; handy when only the order matters.
    pub fn from_ids<I, S>(pivot: Pivot, ids: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ids: Vec<String> = ids.into_iter().map(Into::into).collect();
        let n = ids.len();
        let entries = ids
            .into_iter()
            .enumerate()
            .map(|(i, doc_id)| RankedEntry {
                doc_id,
                score: (n - i) as f64,
            })
            .collect();
        Self::new(pivot, entries)
    }

    pub fn pivot(&self) -> &Pivot {
        &self.pivot
    }

    pub fn entries(&self) -> &[RankedEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> + '_ {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based position of `doc_id`, if present.
    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.doc_id == doc_id).map(|p| p + 1)
    }
}

/// The retriever's similarity function.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    DotProduct,
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityMetric::Cosine => "cosine",
            SimilarityMetric::DotProduct => "dot_product",
        })
    }
}

impl FromStr for SimilarityMetric {
    type Err = BirdError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cosine" => Ok(SimilarityMetric::Cosine),
            "dot" | "dot_product" => Ok(SimilarityMetric::DotProduct),
            other => Err(BirdError::invalid(format!("unknown similarity metric {other:?}"))),
        }
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

#[inline]
pub(crate) fn norm<T: Scalar>(a: &[T]) -> f64 {
    a.iter().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt()
}

/// Combines precomputed parts. Every code path goes through here so that
/// cached, indexed and free-standing similarities agree bit for bit.
#[inline]
pub(crate) fn combine(metric: SimilarityMetric, dot: f64, norm_a: f64, norm_b: f64) -> f64 {
    match metric {
        SimilarityMetric::Cosine => (dot / (norm_a * norm_b)).clamp(-1.0, 1.0),
        SimilarityMetric::DotProduct => dot,
    }
}

pub(crate) fn check_vector<T: Scalar>(
    context: &str,
    vector: &[T],
    dimension: usize,
    metric: SimilarityMetric,
) -> Result<()> {
    if vector.len() != dimension {
        return Err(BirdError::DimensionMismatch {
            context: context.to_string(),
            expected: dimension,
            found: vector.len(),
        });
    }
    if let Some(i) = vector.iter().position(|x| !x.is_finite()) {
        return Err(BirdError::invalid(format!(
            "{context}: component {i} is not finite"
        )));
    }
    if metric == SimilarityMetric::Cosine && vector.iter().all(|x| x.is_zero()) {
        return Err(BirdError::invalid(format!(
            "{context}: zero vector has no cosine similarity"
        )));
    }
    Ok(())
}

/// Similarity between two vectors, accumulated in `f64`.
pub fn similarity<T: Scalar>(a: &[T], b: &[T], metric: SimilarityMetric) -> Result<f64> {
    check_vector("left operand", a, a.len(), metric)?;
    check_vector("right operand", b, a.len(), metric)?;
    let d = dot(a, b);
    Ok(match metric {
        SimilarityMetric::Cosine => combine(metric, d, norm(a), norm(b)),
        SimilarityMetric::DotProduct => d,
    })
}
