//! `bird`: generate poisoned scenarios, run the bidirectional-ranking filter,
//! and produce the analysis tables. Every command writes
//! `<output>.manifest.json` next to its primary output; `bird replay` re-runs
//! a manifest and checks that the outputs hash the same.

mod commands;
mod manifest;

use std::path::PathBuf;

use bird_core::attack::{AttackConfig, ScenarioConfig};
use bird_core::filter::{DEFAULT_ABLATION_THRESHOLD, DEFAULT_EPSILON, DEFAULT_K, DEFAULT_SINGULARITY_GUARD};
use bird_core::{AblationMode, ConsistencyMetric, IndexScope, SimilarityMetric};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "bird", version, about = "Bidirectional-ranking defense against corpus poisoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Debug)]
pub enum Command {
    /// Generate a synthetic poisoned scenario.
    Gen(GenArgs),
    /// Score and filter every query's forward top-k.
    Defend(DefendArgs),
    /// Forward/backward poison frequency by rank.
    Heatmap(HeatmapArgs),
    /// Proxy metrics across values of one parameter.
    Sweep(SweepArgs),
    /// Choose epsilon from validation scores.
    Calibrate(CalibrateArgs),
    /// Proxy metrics and score distributions of a results file.
    Eval(EvalArgs),
    /// Re-run a manifest and verify its output digests.
    Replay(ReplayArgs),
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ScenarioConfig::default().n_queries)]
    pub n_queries: usize,
    #[arg(long, default_value_t = ScenarioConfig::default().n_benign)]
    pub n_benign: usize,
    /// Poisons per query.
    #[arg(long, default_value_t = AttackConfig::default().m)]
    pub m: usize,
    #[arg(long, default_value_t = AttackConfig::default().dimension)]
    pub dimension: usize,
    /// Length of each poison's random offset.
    #[arg(long, default_value_t = AttackConfig::default().poison_tightness)]
    pub poison_tightness: f64,
    /// Weight of the query direction in each poison.
    #[arg(long, default_value_t = AttackConfig::default().poison_pull)]
    pub poison_pull: f64,
    #[arg(long, default_value_t = AttackConfig::default().benign_dispersion)]
    pub benign_dispersion: f64,
    #[arg(long, default_value_t = AttackConfig::default().seed)]
    pub seed: u64,
    /// cosine or dot
    #[arg(long, default_value_t = SimilarityMetric::Cosine)]
    pub similarity: SimilarityMetric,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DefenseOpts {
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// spearman, spearman-positions, jaccard, jaccard-distance, rbo or rbo:<p>
    #[arg(long, default_value_t = ConsistencyMetric::Spearman)]
    pub metric: ConsistencyMetric,
    #[arg(long, default_value_t = DEFAULT_SINGULARITY_GUARD)]
    pub singularity_guard: f64,
    /// pilot (top-20 benign plus the query's poisons) or full
    #[arg(long, default_value_t = IndexScope::Pilot)]
    pub scope: IndexScope,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toggle {
    On,
    Off,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct DefendArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub defense: DefenseOpts,
    /// Precompute document-document similarities.
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub cache: Toggle,
    /// composite, relevance-only or consistency-only
    #[arg(long, default_value_t = AblationMode::Composite)]
    pub mode: AblationMode,
    #[arg(long, default_value_t = DEFAULT_ABLATION_THRESHOLD)]
    pub relevance_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_ABLATION_THRESHOLD)]
    pub consistency_threshold: f64,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// CSV matrix.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional SVG rendering.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = IndexScope::Pilot)]
    pub scope: IndexScope,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    /// epsilon, k, m or metric
    #[arg(long)]
    pub axis: String,
    /// `start:end[:step]` (inclusive) or a comma list
    #[arg(long)]
    pub values: String,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub defense: DefenseOpts,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// Results file from `bird defend`.
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    pub results: Option<PathBuf>,
    /// CSV with `label,score` rows.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Fraction of poison scores that must exceed epsilon.
    #[arg(long, default_value_t = 0.95, conflicts_with = "fixed")]
    pub q: f64,
    /// Used when the poison scores give no finite bound.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub fallback: f64,
    /// Skip the quantile rule and report this epsilon.
    #[arg(long)]
    pub fixed: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    commands::dispatch(cli.command)
}
