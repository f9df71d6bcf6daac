//! Rank-position heatmaps, retrieval-level proxy metrics, parameter sweeps
//! and score summaries.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{IndexScope, QueryView, Scenario};
use crate::error::{BirdError, Result};
use crate::filter::{defend_ablated, AblationMode, AblationThresholds, DefenseConfig, DefenseResult, Verdict};
use crate::rank::ConsistencyMetric;
use crate::scalar::Scalar;
use crate::types::Label;

/// Poison counts per rank position: one forward column and one row per
/// backward list (row `i` pivots on the forward rank `i + 1` document).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub k: usize,
    pub num_queries: usize,
    pub forward_counts: Vec<u64>,
    pub backward_counts: Vec<Vec<u64>>,
}

impl HeatmapMatrix {
    fn frequency(&self, count: u64) -> f64 {
        count as f64 / self.num_queries as f64
    }

    pub fn forward_column(&self) -> Vec<f64> {
        self.forward_counts.iter().map(|&c| self.frequency(c)).collect()
    }

    pub fn backward_rows(&self) -> Vec<Vec<f64>> {
        self.backward_counts
            .iter()
            .map(|row| row.iter().map(|&c| self.frequency(c)).collect())
            .collect()
    }

    /// Mean forward frequency over the 1-based rank range `from..=to`.
    pub fn forward_mean(&self, from: usize, to: usize) -> f64 {
        let col = self.forward_column();
        let slice = &col[from - 1..to];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    /// `k` rows of `k + 1` comma-separated frequencies: the forward column
    /// first, then the backward row, under a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fw_rank,forward");
        for j in 1..=self.k {
            let _ = write!(out, ",bw_{j}");
        }
        out.push('\n');
        let fw = self.forward_column();
        let bw = self.backward_rows();
        for i in 0..self.k {
            let _ = write!(out, "{},{}", i + 1, fw[i]);
            for v in &bw[i] {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Self-contained SVG rendering, white (0) to dark red (1).
    pub fn to_svg(&self) -> String {
        const CELL: usize = 18;
        const MARGIN: usize = 40;
        const GAP: usize = 12;
        let fw = self.forward_column();
        let bw = self.backward_rows();
        let width = MARGIN * 2 + CELL * (self.k + 1) + GAP;
        let height = MARGIN * 2 + CELL * self.k;
        let color = |v: f64| {
            let v = v.clamp(0.0, 1.0);
            let g = (255.0 * (1.0 - v)).round() as u8;
            let r = (255.0 - 115.0 * v).round() as u8;
            format!("#{r:02x}{g:02x}{g:02x}")
        };
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
        );
        let _ = writeln!(svg, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN}" y="{}">forward</text><text x="{}" y="{}">backward rank</text>"#,
            MARGIN - 8,
            MARGIN + CELL + GAP,
            MARGIN - 8
        );
        for i in 0..self.k {
            let y = MARGIN + i * CELL;
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                MARGIN - 4,
                y + CELL - 5,
                i + 1
            );
            let _ = writeln!(
                svg,
                r#"<rect x="{MARGIN}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="grey" stroke-width="0.5"><title>fw {}: {:.3}</title></rect>"#,
                color(fw[i]),
                i + 1,
                fw[i]
            );
            for (j, v) in bw[i].iter().enumerate() {
                let x = MARGIN + CELL + GAP + j * CELL;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="grey" stroke-width="0.5"><title>row {} bw {}: {:.3}</title></rect>"#,
                    color(*v),
                    i + 1,
                    j + 1,
                    v
                );
            }
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// Aggregates poison positions over every view's forward and backward lists.
pub fn heatmap<T: Scalar>(views: &[QueryView<T>], k: usize) -> Result<HeatmapMatrix> {
    if views.is_empty() {
        return Err(BirdError::EmptyScenario("no queries to aggregate".into()));
    }
    if k == 0 {
        return Err(BirdError::invalid("k must be positive"));
    }
    let per_query: Vec<(Vec<u64>, Vec<Vec<u64>>)> = views
        .par_iter()
        .map(|v| {
            let is_poison = |id: &str| v.index.get(id).is_some_and(|d| d.label == Label::Poison);
            let fw = v.index.forward_retrieve(&v.query, k)?;
            let mut fwc = vec![0u64; k];
            let mut bwc = vec![vec![0u64; k]; k];
            for (i, id) in fw.ids().enumerate() {
                fwc[i] += u64::from(is_poison(id));
            }
            for (i, bw) in v.index.batch_backward(&fw, k)?.iter().enumerate() {
                for (j, id) in bw.ids().enumerate() {
                    bwc[i][j] += u64::from(is_poison(id));
                }
            }
            Ok((fwc, bwc))
        })
        .collect::<Result<_>>()?;
    let mut forward_counts = vec![0u64; k];
    let mut backward_counts = vec![vec![0u64; k]; k];
    for (fwc, bwc) in per_query {
        for i in 0..k {
            forward_counts[i] += fwc[i];
            for j in 0..k {
                backward_counts[i][j] += bwc[i][j];
            }
        }
    }
    Ok(HeatmapMatrix {
        k,
        num_queries: views.len(),
        forward_counts,
        backward_counts,
    })
}

/// Defends every view, in view order.
pub fn evaluate<T: Scalar>(
    views: &[QueryView<T>],
    config: &DefenseConfig,
    mode: AblationMode,
    thresholds: &AblationThresholds,
) -> Result<Vec<DefenseResult>> {
    views
        .par_iter()
        .map(|v| defend_ablated(&v.index, &v.query, config, mode, thresholds))
        .collect()
}

/// Retrieval-level stand-ins for attack success and answer accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyMetrics {
    /// Queries whose clean set still holds a poison.
    pub poison_leak_rate: f64,
    /// Queries whose gold document survives filtering.
    pub gold_retention: f64,
    /// Poisons among filtered documents (1 when nothing was filtered).
    pub filter_precision: f64,
    /// Filtered poisons among poisons in the top-k (1 when none were retrieved).
    pub filter_recall: f64,
    pub mean_benign_kept: f64,
    pub num_queries: usize,
}

pub fn proxy_metrics<T: Scalar>(results: &[DefenseResult], scenario: &Scenario<T>) -> Result<ProxyMetrics> {
    if results.is_empty() {
        return Err(BirdError::invalid("no defense results"));
    }
    let labels: HashMap<&str, Label> = scenario.corpus.iter().map(|d| (d.id.as_str(), d.label)).collect();
    let queries: HashSet<&str> = scenario.queries.iter().map(|q| q.id.as_str()).collect();
    let mut leaks = 0usize;
    let mut gold_kept = 0usize;
    let mut filtered = 0usize;
    let mut filtered_poison = 0usize;
    let mut retrieved_poison = 0usize;
    let mut benign_kept = 0usize;
    for r in results {
        if !queries.contains(r.query_id.as_str()) {
            return Err(BirdError::NotFound(format!("query {}", r.query_id)));
        }
        let label = |id: &str| {
            labels
                .get(id)
                .copied()
                .ok_or_else(|| BirdError::NotFound(format!("document {id}")))
        };
        let mut leaked = false;
        for d in &r.scored {
            let poison = label(&d.doc_id)?.is_poison();
            retrieved_poison += usize::from(poison);
            match d.verdict {
                Verdict::Filtered => {
                    filtered += 1;
                    filtered_poison += usize::from(poison);
                }
                Verdict::Kept => {
                    leaked |= poison;
                    benign_kept += usize::from(!poison);
                }
            }
        }
        leaks += usize::from(leaked);
        if let Some(gold) = scenario.gold_map.get(&r.query_id) {
            gold_kept += usize::from(r.clean_ids.iter().any(|id| id == gold));
        }
    }
    let n = results.len() as f64;
    Ok(ProxyMetrics {
        poison_leak_rate: leaks as f64 / n,
        gold_retention: gold_kept as f64 / n,
        filter_precision: if filtered == 0 {
            1.0
        } else {
            filtered_poison as f64 / filtered as f64
        },
        filter_recall: if retrieved_poison == 0 {
            1.0
        } else {
            filtered_poison as f64 / retrieved_poison as f64
        },
        mean_benign_kept: benign_kept as f64 / n,
        num_queries: results.len(),
    })
}

/// A single swept parameter and its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon(Vec<f64>),
    K(Vec<usize>),
    M(Vec<usize>),
    Metric(Vec<ConsistencyMetric>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Epsilon(_) => "epsilon",
            SweepAxis::K(_) => "k",
            SweepAxis::M(_) => "m",
            SweepAxis::Metric(_) => "metric",
        }
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        match self {
            SweepAxis::Epsilon(v) => v.len(),
            SweepAxis::K(v) => v.len(),
            SweepAxis::M(v) => v.len(),
            SweepAxis::Metric(v) => v.len(),
        }
    }

    /// Parses `epsilon 1:3.5:0.5`, `k 10,20,30`, `m 0:5`, `metric spearman,jaccard,rbo`.
    /// Ranges are `start:end[:step]`, inclusive, step defaulting to 1.
    pub fn parse(axis: &str, values: &str) -> Result<Self> {
        let floats = || -> Result<Vec<f64>> {
            if values.contains(':') {
                let parts: Vec<f64> = values
                    .split(':')
                    .map(|p| p.trim().parse::<f64>().map_err(|_| BirdError::invalid(format!("bad number {p:?}"))))
                    .collect::<Result<_>>()?;
                let (start, end, step) = match parts.as_slice() {
                    [s, e] => (*s, *e, 1.0),
                    [s, e, st] => (*s, *e, *st),
                    _ => return Err(BirdError::invalid(format!("bad range {values:?}"))),
                };
                if !(step > 0.0) || end < start {
                    return Err(BirdError::invalid(format!("empty or invalid range {values:?}")));
                }
                let count = ((end - start) / step + 1e-9).floor() as usize + 1;
                Ok((0..count).map(|i| start + i as f64 * step).collect())
            } else {
                values
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(|p| p.trim().parse::<f64>().map_err(|_| BirdError::invalid(format!("bad number {p:?}"))))
                    .collect()
            }
        };
        let ints = || -> Result<Vec<usize>> {
            floats()?
                .into_iter()
                .map(|v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(BirdError::invalid(format!("{v} is not a non-negative integer")))
                    }
                })
                .collect()
        };
        let axis = match axis.to_ascii_lowercase().as_str() {
            "epsilon" | "eps" => SweepAxis::Epsilon(floats()?),
            "k" => SweepAxis::K(ints()?),
            "m" => SweepAxis::M(ints()?),
            "metric" => SweepAxis::Metric(
                values
                    .split(',')
                    .filter(|p| !p.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?,
            ),
            other => return Err(BirdError::invalid(format!("unknown sweep axis {other:?}"))),
        };
        if axis.len() == 0 {
            return Err(BirdError::invalid("sweep range is empty"));
        }
        Ok(axis)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: ProxyMetrics,
}

/// One row of proxy metrics per axis value, all else held at `template`.
pub fn sweep<T: Scalar>(
    scenario: &Scenario<T>,
    template: &DefenseConfig,
    scope: IndexScope,
    axis: &SweepAxis,
) -> Result<Vec<SweepRow>> {
    if axis.len() == 0 {
        return Err(BirdError::invalid("sweep range is empty"));
    }
    let run = |s: &Scenario<T>, views: &[QueryView<T>], config: &DefenseConfig| -> Result<ProxyMetrics> {
        let results = evaluate(views, config, AblationMode::Composite, &AblationThresholds::default())?;
        proxy_metrics(&results, s)
    };
    match axis {
        SweepAxis::Epsilon(values) => {
            let views = scenario.views(scope, true)?;
            values
                .iter()
                .map(|&epsilon| {
                    let config = DefenseConfig { epsilon, ..*template };
                    Ok(SweepRow {
                        value: epsilon.to_string(),
                        metrics: run(scenario, &views, &config)?,
                    })
                })
                .collect()
        }
        SweepAxis::K(values) => {
            let views = scenario.views(scope, true)?;
            values
                .iter()
                .map(|&k| {
                    let config = DefenseConfig { k, ..*template };
                    Ok(SweepRow {
                        value: k.to_string(),
                        metrics: run(scenario, &views, &config)?,
                    })
                })
                .collect()
        }
        SweepAxis::Metric(values) => {
            let views = scenario.views(scope, true)?;
            values
                .iter()
                .map(|&consistency_metric| {
                    let config = DefenseConfig {
                        consistency_metric,
                        ..*template
                    };
                    Ok(SweepRow {
                        value: consistency_metric.to_string(),
                        metrics: run(scenario, &views, &config)?,
                    })
                })
                .collect()
        }
        SweepAxis::M(values) => values
            .iter()
            .map(|&m| {
                let trimmed = scenario.with_poison_budget(m)?;
                let views = trimmed.views(scope, true)?;
                // a poison-free pilot subset has 20 documents
                let k = template.k.min(views.iter().map(|v| v.index.len()).min().unwrap_or(template.k));
                let config = DefenseConfig { k, ..*template };
                Ok(SweepRow {
                    value: m.to_string(),
                    metrics: run(&trimmed, &views, &config)?,
                })
            })
            .collect(),
    }
}

/// Comma-separated sweep table with a header line.
pub fn sweep_to_csv(axis: &str, rows: &[SweepRow]) -> String {
    let mut out = format!(
        "{axis},poison_leak_rate,gold_retention,filter_precision,filter_recall,mean_benign_kept,num_queries\n"
    );
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.value,
            m.poison_leak_rate,
            m.gold_retention,
            m.filter_precision,
            m.filter_recall,
            m.mean_benign_kept,
            m.num_queries
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScoreSummary {
    pub total: usize,
    pub infinity_count: usize,
    pub finite: Option<FiniteStats>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub benign: LabelScoreSummary,
    pub poison: LabelScoreSummary,
}

// linear interpolation between closest ranks
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn summarize(scores: &[f64]) -> LabelScoreSummary {
    let mut finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
    finite.sort_by(f64::total_cmp);
    let stats = (!finite.is_empty()).then(|| FiniteStats {
        count: finite.len(),
        mean: finite.iter().sum::<f64>() / finite.len() as f64,
        median: quantile(&finite, 0.5),
        min: finite[0],
        max: finite[finite.len() - 1],
        q05: quantile(&finite, 0.05),
        q25: quantile(&finite, 0.25),
        q75: quantile(&finite, 0.75),
        q95: quantile(&finite, 0.95),
    });
    LabelScoreSummary {
        total: scores.len(),
        infinity_count: scores.len() - finite.len(),
        finite: stats,
    }
}

/// Composite scores of every scored document, split by label.
pub fn scores_by_label(results: &[DefenseResult]) -> (Vec<f64>, Vec<f64>) {
    let mut benign = Vec::new();
    let mut poison = Vec::new();
    for d in results.iter().flat_map(|r| &r.scored) {
        match d.label {
            Label::Benign => benign.push(d.score),
            Label::Poison => poison.push(d.score),
        }
    }
    (benign, poison)
}

pub fn score_distributions(results: &[DefenseResult]) -> ScoreSummary {
    let (benign, poison) = scores_by_label(results);
    ScoreSummary {
        benign: summarize(&benign),
        poison: summarize(&poison),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::ScoredDocument;

    fn scored(id: &str, label: Label, score: f64, verdict: Verdict) -> ScoredDocument {
        ScoredDocument {
            doc_id: id.into(),
            fw_rank: 1,
            label,
            r_cr: 0.5,
            r_cc: 0.0,
            score,
            verdict,
        }
    }

    #[test]
    fn summary_of_infinite_poisons() {
        let r = DefenseResult {
            query_id: "q".into(),
            mode: AblationMode::Composite,
            scored: vec![
                scored("p", Label::Poison, f64::INFINITY, Verdict::Filtered),
                scored("a", Label::Benign, 0.4, Verdict::Kept),
                scored("b", Label::Benign, 0.6, Verdict::Kept),
            ],
            clean_ids: vec!["a".into(), "b".into()],
            audit: Default::default(),
        };
        let s = score_distributions(&[r]);
        assert_eq!(s.poison.infinity_count, 1);
        assert_eq!(s.poison.total, 1);
        assert!(s.poison.finite.is_none());
        assert!((s.benign.finite.unwrap().mean - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn axis_parsing() {
        assert_eq!(
            SweepAxis::parse("epsilon", "1:3.5:0.5").unwrap(),
            SweepAxis::Epsilon(vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5])
        );
        assert_eq!(SweepAxis::parse("m", "0:5").unwrap(), SweepAxis::M(vec![0, 1, 2, 3, 4, 5]));
        assert_eq!(SweepAxis::parse("k", "10,20").unwrap(), SweepAxis::K(vec![10, 20]));
        assert!(SweepAxis::parse("k", "1.5").is_err());
        assert!(SweepAxis::parse("epsilon", "3:1").is_err());
        assert!(SweepAxis::parse("epsilon", "").is_err());
        assert!(SweepAxis::parse("temperature", "1").is_err());
        assert_eq!(
            SweepAxis::parse("metric", "spearman,jaccard,rbo").unwrap(),
            SweepAxis::Metric(vec![
                ConsistencyMetric::Spearman,
                ConsistencyMetric::Jaccard,
                ConsistencyMetric::Rbo { p: 0.9 }
            ])
        );
    }

    #[test]
    fn heatmap_csv_shape() {
        let h = HeatmapMatrix {
            k: 2,
            num_queries: 2,
            forward_counts: vec![2, 1],
            backward_counts: vec![vec![1, 0], vec![0, 2]],
        };
        assert_eq!(h.to_csv(), "fw_rank,forward,bw_1,bw_2\n1,1,0.5,0\n2,0.5,0,1\n");
        assert!(h.to_svg().starts_with("<svg"));
        assert_eq!(h.forward_mean(1, 2), 0.75);
    }
}
