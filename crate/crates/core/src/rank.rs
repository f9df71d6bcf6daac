//! Similarity between two ranked lists.
//!
//! [`spearman`] re-ranks the documents common to both lists (relative ranks
//! `1..=|C|`), which keeps the coefficient inside `[-1, 1]`.
//! [`spearman_positions`] is the alternative reading that plugs raw list
//! positions into the same formula; it can leave that interval.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::types::RankedList;

/// Conventional RBO persistence.
pub const DEFAULT_RBO_P: f64 = 0.9;

/// Documents present in both lists, with ranks relative to that common set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommonSet {
    /// Common ids in forward order.
    pub ids: Vec<String>,
    pub fw_rank: HashMap<String, usize>,
    pub bw_rank: HashMap<String, usize>,
}

impl CommonSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn common_set(fw: &RankedList, bw: &RankedList) -> CommonSet {
    let fw_ids: HashSet<&str> = fw.ids().collect();
    let bw_ids: HashSet<&str> = bw.ids().collect();
    let ids: Vec<String> = fw.ids().filter(|id| bw_ids.contains(id)).map(str::to_string).collect();
    let fw_rank = ids.iter().enumerate().map(|(i, id)| (id.clone(), i + 1)).collect();
    let bw_rank = bw
        .ids()
        .filter(|id| fw_ids.contains(id))
        .enumerate()
        .map(|(i, id)| (id.to_string(), i + 1))
        .collect();
    CommonSet { ids, fw_rank, bw_rank }
}

fn spearman_from_sum(n: usize, sum_sq: f64) -> f64 {
    let n = n as f64;
    1.0 - 6.0 * sum_sq / (n * (n * n - 1.0))
}

/// Spearman correlation over the common set; 0 when fewer than two documents are shared.
pub fn spearman(fw: &RankedList, bw: &RankedList) -> f64 {
    let common = common_set(fw, bw);
    if common.len() < 2 {
        return 0.0;
    }
    let sum_sq: f64 = common
        .ids
        .iter()
        .map(|id| {
            let d = common.fw_rank[id] as f64 - common.bw_rank[id] as f64;
            d * d
        })
        .sum();
    spearman_from_sum(common.len(), sum_sq)
}

/// Same formula using each document's raw 1-based position in its full list.
pub fn spearman_positions(fw: &RankedList, bw: &RankedList) -> f64 {
    let bw_pos: HashMap<&str, usize> = bw.ids().enumerate().map(|(i, id)| (id, i + 1)).collect();
    let pairs: Vec<(usize, usize)> = fw
        .ids()
        .enumerate()
        .filter_map(|(i, id)| bw_pos.get(id).map(|&j| (i + 1, j)))
        .collect();
    if pairs.len() < 2 {
        return 0.0;
    }
    let sum_sq: f64 = pairs
        .iter()
        .map(|&(f, b)| {
            let d = f as f64 - b as f64;
            d * d
        })
        .sum();
    spearman_from_sum(pairs.len(), sum_sq)
}

/// Jaccard similarity of the two id sets; 0 for two empty lists.
pub fn jaccard(fw: &RankedList, bw: &RankedList) -> f64 {
    let a: HashSet<&str> = fw.ids().collect();
    let b: HashSet<&str> = bw.ids().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Rank-biased overlap truncated at the shorter list and normalised so that
/// identical prefixes score exactly 1.
pub fn rbo(fw: &RankedList, bw: &RankedList, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(BirdError::invalid(format!("RBO persistence must lie in (0, 1), got {p}")));
    }
    let fw: Vec<&str> = fw.ids().collect();
    let bw: Vec<&str> = bw.ids().collect();
    let depth = fw.len().min(bw.len());
    if depth == 0 {
        return Ok(0.0);
    }
    let mut seen_fw = HashSet::with_capacity(depth);
    let mut seen_bw = HashSet::with_capacity(depth);
    let mut overlap = 0usize;
    let mut weight = 1.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for d in 0..depth {
        let (x, y) = (fw[d], bw[d]);
        if x == y {
            overlap += 1;
        } else {
            if seen_bw.contains(x) {
                overlap += 1;
            }
            if seen_fw.contains(y) {
                overlap += 1;
            }
        }
        seen_fw.insert(x);
        seen_bw.insert(y);
        num += weight * overlap as f64 / (d + 1) as f64;
        den += weight;
        weight *= p;
    }
    Ok(num / den)
}

/// The ranking-similarity function that yields context consistency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ConsistencyMetric {
    /// Spearman over common-set relative ranks.
    #[default]
    Spearman,
    /// Spearman over raw list positions.
    SpearmanPositions,
    Jaccard,
    /// `1 - jaccard`.
    JaccardDistance,
    Rbo { p: f64 },
}

impl ConsistencyMetric {
    pub fn validate(&self) -> Result<()> {
        if let ConsistencyMetric::Rbo { p } = *self {
            if !(p > 0.0 && p < 1.0) {
                return Err(BirdError::invalid(format!("RBO persistence must lie in (0, 1), got {p}")));
            }
        }
        Ok(())
    }

    pub fn score(&self, fw: &RankedList, bw: &RankedList) -> Result<f64> {
        Ok(match *self {
            ConsistencyMetric::Spearman => spearman(fw, bw),
            ConsistencyMetric::SpearmanPositions => spearman_positions(fw, bw),
            ConsistencyMetric::Jaccard => jaccard(fw, bw),
            ConsistencyMetric::JaccardDistance => 1.0 - jaccard(fw, bw),
            ConsistencyMetric::Rbo { p } => rbo(fw, bw, p)?,
        })
    }
}

impl fmt::Display for ConsistencyMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsistencyMetric::Spearman => f.write_str("spearman"),
            ConsistencyMetric::SpearmanPositions => f.write_str("spearman-positions"),
            ConsistencyMetric::Jaccard => f.write_str("jaccard"),
            ConsistencyMetric::JaccardDistance => f.write_str("jaccard-distance"),
            ConsistencyMetric::Rbo { p } => write!(f, "rbo:{p}"),
        }
    }
}

impl FromStr for ConsistencyMetric {
    type Err = BirdError;

    /// Accepts `spearman`, `spearman-positions`, `jaccard`, `jaccard-distance`,
    /// `rbo` and `rbo:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase().replace('_', "-");
        let metric = match s.as_str() {
            "spearman" => ConsistencyMetric::Spearman,
            "spearman-positions" => ConsistencyMetric::SpearmanPositions,
            "jaccard" => ConsistencyMetric::Jaccard,
            "jaccard-distance" => ConsistencyMetric::JaccardDistance,
            "rbo" => ConsistencyMetric::Rbo { p: DEFAULT_RBO_P },
            other => match other.strip_prefix("rbo:") {
                Some(p) => ConsistencyMetric::Rbo {
                    p: p.parse()
                        .map_err(|_| BirdError::invalid(format!("bad RBO persistence {p:?}")))?,
                },
                None => return Err(BirdError::invalid(format!("unknown consistency metric {other:?}"))),
            },
        };
        metric.validate()?;
        Ok(metric)
    }
}

impl TryFrom<String> for ConsistencyMetric {
    type Error = BirdError;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

impl From<ConsistencyMetric> for String {
    fn from(value: ConsistencyMetric) -> Self {
        value.to_string()
    }
}
