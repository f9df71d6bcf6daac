//! The bidirectional-ranking filter.
//!
//! For every document in the forward top-k the filter measures content
//! relevance (query similarity) and context consistency (agreement between
//! the document's own backward ranking and the query's forward ranking), then
//! combines them as `r_cr / (1 - r_cc)` and keeps documents whose score stays
//! at or below `epsilon`.

use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::index::CorpusIndex;
use crate::rank::ConsistencyMetric;
use crate::scalar::Scalar;
use crate::types::{similarity, EmbeddedDocument, Label, Query, SimilarityMetric};

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_EPSILON: f64 = 2.5;
pub const DEFAULT_SINGULARITY_GUARD: f64 = 1e-9;
pub const DEFAULT_ABLATION_THRESHOLD: f64 = 0.85;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub k: usize,
    pub epsilon: f64,
    pub consistency_metric: ConsistencyMetric,
    /// Denominators `1 - r_cc` below this map to an infinite score.
    pub singularity_guard: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            epsilon: DEFAULT_EPSILON,
            consistency_metric: ConsistencyMetric::Spearman,
            singularity_guard: DEFAULT_SINGULARITY_GUARD,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(BirdError::invalid("k must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(BirdError::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.singularity_guard > 0.0 && self.singularity_guard < 1.0) {
            return Err(BirdError::invalid(format!(
                "singularity guard must lie in (0, 1), got {}",
                self.singularity_guard
            )));
        }
        self.consistency_metric.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Kept,
    Filtered,
}

/// Per-document audit record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub doc_id: String,
    /// 1-based forward position.
    pub fw_rank: usize,
    pub label: Label,
    pub r_cr: f64,
    pub r_cc: f64,
    #[serde(with = "score_serde")]
    pub score: f64,
    pub verdict: Verdict,
}

/// Which signal drives the keep/filter decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    RelevanceOnly,
    ConsistencyOnly,
    #[default]
    Composite,
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationMode::RelevanceOnly => "relevance-only",
            AblationMode::ConsistencyOnly => "consistency-only",
            AblationMode::Composite => "composite",
        })
    }
}

impl std::str::FromStr for AblationMode {
    type Err = BirdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relevance-only" => Ok(AblationMode::RelevanceOnly),
            "consistency-only" => Ok(AblationMode::ConsistencyOnly),
            "composite" => Ok(AblationMode::Composite),
            other => Err(BirdError::invalid(format!(
                "unknown mode {other:?}; expected composite, relevance-only or consistency-only"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationThresholds {
    pub relevance: f64,
    pub consistency: f64,
}

impl Default for AblationThresholds {
    fn default() -> Self {
        Self {
            relevance: DEFAULT_ABLATION_THRESHOLD,
            consistency: DEFAULT_ABLATION_THRESHOLD,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAudit {
    pub kept_benign: usize,
    pub kept_poison: usize,
    pub filtered_benign: usize,
    pub filtered_poison: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseResult {
    pub query_id: String,
    pub mode: AblationMode,
    /// Forward order.
    pub scored: Vec<ScoredDocument>,
    /// Kept documents in forward order.
    pub clean_ids: Vec<String>,
    pub audit: LabelAudit,
}

impl DefenseResult {
    fn assemble(query_id: String, mode: AblationMode, scored: Vec<ScoredDocument>) -> Self {
        let mut audit = LabelAudit::default();
        for d in &scored {
            match (d.verdict, d.label) {
                (Verdict::Kept, Label::Benign) => audit.kept_benign += 1,
                (Verdict::Kept, Label::Poison) => audit.kept_poison += 1,
                (Verdict::Filtered, Label::Benign) => audit.filtered_benign += 1,
                (Verdict::Filtered, Label::Poison) => audit.filtered_poison += 1,
            }
        }
        let clean_ids = scored
            .iter()
            .filter(|d| d.verdict == Verdict::Kept)
            .map(|d| d.doc_id.clone())
            .collect();
        Self {
            query_id,
            mode,
            scored,
            clean_ids,
            audit,
        }
    }
}

pub fn content_relevance<T: Scalar>(
    query: &Query<T>,
    doc: &EmbeddedDocument<T>,
    metric: SimilarityMetric,
) -> Result<f64> {
    similarity(&query.vector, &doc.vector, metric)
}

/// `r_cr / (1 - r_cc)`, or `+inf` when the denominator falls below `guard`.
pub fn composite_score(r_cr: f64, r_cc: f64, guard: f64) -> f64 {
    let denom = 1.0 - r_cc;
    if denom < guard {
        f64::INFINITY
    } else {
        r_cr / denom
    }
}

fn keep_composite(score: f64, epsilon: f64) -> Verdict {
    if score.is_finite() && score <= epsilon {
        Verdict::Kept
    } else {
        Verdict::Filtered
    }
}

/// One forward pass, one batch of backward passes, then per-document scores.
fn score_forward<T: Scalar>(
    index: &CorpusIndex<T>,
    query: &Query<T>,
    config: &DefenseConfig,
) -> Result<Vec<ScoredDocument>> {
    config.validate()?;
    if config.k > index.len() {
        return Err(BirdError::invalid(format!(
            "k = {} exceeds corpus size {}",
            config.k,
            index.len()
        )));
    }
    let forward = index.forward_retrieve(query, config.k)?;
    let backward = index.batch_backward(&forward, config.k)?;
    forward
        .entries()
        .iter()
        .zip(&backward)
        .enumerate()
        .map(|(i, (entry, bw))| {
            let doc = index
                .get(&entry.doc_id)
                .ok_or_else(|| BirdError::NotFound(entry.doc_id.clone()))?;
            // The forward score is the query/document similarity itself.
            let r_cr = entry.score;
            let r_cc = config.consistency_metric.score(&forward, bw)?;
            let score = composite_score(r_cr, r_cc, config.singularity_guard);
            Ok(ScoredDocument {
                doc_id: entry.doc_id.clone(),
                fw_rank: i + 1,
                label: doc.label,
                r_cr,
                r_cc,
                score,
                verdict: keep_composite(score, config.epsilon),
            })
        })
        .collect()
}

/// Runs the full defense for one query.
pub fn defend<T: Scalar>(
    index: &CorpusIndex<T>,
    query: &Query<T>,
    config: &DefenseConfig,
) -> Result<DefenseResult> {
    let scored = score_forward(index, query, config)?;
    Ok(DefenseResult::assemble(query.id.clone(), AblationMode::Composite, scored))
}

/// Single-signal variants. Scores are still reported; only verdicts change.
pub fn defend_ablated<T: Scalar>(
    index: &CorpusIndex<T>,
    query: &Query<T>,
    config: &DefenseConfig,
    mode: AblationMode,
    thresholds: &AblationThresholds,
) -> Result<DefenseResult> {
    if mode == AblationMode::Composite {
        return defend(index, query, config);
    }
    let mut scored = score_forward(index, query, config)?;
    for d in &mut scored {
        let kept = match mode {
            AblationMode::RelevanceOnly => d.r_cr <= thresholds.relevance,
            AblationMode::ConsistencyOnly => d.r_cc <= thresholds.consistency,
            AblationMode::Composite => unreachable!(),
        };
        d.verdict = if kept { Verdict::Kept } else { Verdict::Filtered };
    }
    Ok(DefenseResult::assemble(query.id.clone(), mode, scored))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum CalibrationPolicy {
    /// Filter at least a fraction `q` of poison samples; `fallback` is used
    /// when the samples impose no finite bound.
    Quantile { q: f64, fallback: f64 },
    Fixed { epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub epsilon: f64,
    /// Fraction of poison samples with score above `epsilon`.
    pub poison_filtered_fraction: Option<f64>,
    /// Fraction of benign samples with score at or below `epsilon`.
    pub benign_kept_fraction: Option<f64>,
}

fn kept_fraction(samples: &[f64], epsilon: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let kept = samples.iter().filter(|&&s| s <= epsilon).count();
    Some(kept as f64 / samples.len() as f64)
}

/// Picks `epsilon` from validation scores.
///
/// The quantile policy returns the largest finite threshold that keeps at most
/// `floor((1 - q) * n)` of the `n` poison samples.
pub fn calibrate_threshold(
    poison_scores: &[f64],
    benign_scores: &[f64],
    policy: CalibrationPolicy,
) -> Result<Calibration> {
    if poison_scores.iter().chain(benign_scores).any(|s| s.is_nan()) {
        return Err(BirdError::Calibration("score samples contain NaN".into()));
    }
    let epsilon = match policy {
        CalibrationPolicy::Fixed { epsilon } => {
            if !(epsilon > 0.0 && epsilon.is_finite()) {
                return Err(BirdError::Calibration(format!("fixed epsilon must be positive, got {epsilon}")));
            }
            epsilon
        }
        CalibrationPolicy::Quantile { q, fallback } => {
            if !(q > 0.0 && q < 1.0) {
                return Err(BirdError::Calibration(format!("quantile must lie in (0, 1), got {q}")));
            }
            if !(fallback > 0.0 && fallback.is_finite()) {
                return Err(BirdError::Calibration(format!("fallback must be positive, got {fallback}")));
            }
            if poison_scores.is_empty() {
                return Err(BirdError::Calibration("no poison samples to calibrate on".into()));
            }
            let mut finite: Vec<f64> = poison_scores.iter().copied().filter(|s| s.is_finite()).collect();
            finite.sort_by(f64::total_cmp);
            // allowed number of poisons at or below epsilon
            let allowed = ((1.0 - q) * poison_scores.len() as f64 + 1e-9).floor() as usize;
            match finite.get(allowed) {
                None => fallback,
                Some(&bound) => {
                    let eps = bound.next_down();
                    if !(eps > 0.0) {
                        return Err(BirdError::Calibration(format!(
                            "poison scores reach {bound}; no positive threshold filters the requested fraction"
                        )));
                    }
                    eps
                }
            }
        }
    };
    let poison_filtered_fraction = kept_fraction(poison_scores, epsilon).map(|k| 1.0 - k);
    Ok(Calibration {
        epsilon,
        poison_filtered_fraction,
        benign_kept_fraction: kept_fraction(benign_scores, epsilon),
    })
}

/// JSON has no infinity; the sentinel is written as the string `"inf"`.
mod score_serde {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;
    use std::fmt;

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *value == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct ScoreVisitor;

        impl<'de> Visitor<'de> for ScoreVisitor {
            type Value = f64;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "inf" => Ok(f64::INFINITY),
                    other => Err(E::custom(format!("unexpected score {other:?}"))),
                }
            }
        }

        d.deserialize_any(ScoreVisitor)
    }
}
