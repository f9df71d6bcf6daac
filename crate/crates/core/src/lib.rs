//! Bidirectional-ranking defense against retrieval corpus poisoning.
//!
//! Each document in a query's forward top-k is re-used as a query of its own.
//! Poisoned documents crafted against the same query sit in a tight cluster,
//! so their backward rankings mirror the forward ranking; benign documents'
//! rankings do not. The filter combines that context consistency with plain
//! content relevance and drops documents whose composite score exceeds a
//! threshold.
//!
//! Everything numeric is generic over a storage [`Scalar`] (`f32` or `f64`);
//! the aliases below fix it to `f32`, the default for corpora.

// Negated comparisons below are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod attack;
pub mod error;
pub mod filter;
pub mod index;
pub mod rank;
pub mod results_io;
pub mod scalar;
pub mod scenario_io;
pub mod types;

pub use analytics::{
    evaluate, heatmap, proxy_metrics, score_distributions, sweep, HeatmapMatrix, ProxyMetrics,
    ScoreSummary, SweepAxis, SweepRow,
};
pub use attack::{
    build_pilot_subset, generate_benign, generate_poisons, generate_queries, generate_scenario,
    inject, AttackConfig, IndexScope, QueryView, Scenario, ScenarioConfig,
};
pub use error::{BirdError, Result};
pub use filter::{
    calibrate_threshold, composite_score, content_relevance, defend, defend_ablated,
    AblationMode, AblationThresholds, Calibration, CalibrationPolicy, DefenseConfig,
    DefenseResult, LabelAudit, ScoredDocument, Verdict,
};
pub use index::{CorpusIndex, PairwiseCache, RetrievalStats};
pub use rank::{common_set, jaccard, rbo, spearman, spearman_positions, CommonSet, ConsistencyMetric};
pub use results_io::{read_results, results_to_bytes, write_results};
pub use scalar::Scalar;
pub use scenario_io::{load_scenario, read_scenario, save_scenario, write_scenario};
pub use types::{
    similarity, EmbeddedDocument, Label, Pivot, Query, RankedEntry, RankedList, SimilarityMetric,
};

pub type Document = EmbeddedDocument<f32>;
pub type Index = CorpusIndex<f32>;
pub type DefaultScenario = Scenario<f32>;
pub type Document64 = EmbeddedDocument<f64>;
pub type Index64 = CorpusIndex<f64>;
pub type Scenario64 = Scenario<f64>;
