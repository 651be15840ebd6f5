//! Which dependencies the attention mechanism singles out.

use std::collections::{BTreeMap, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::AttentionRecord;
use crate::graph::{EdgeType, EventGraph};

/// Which layers contribute to an edge's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPool {
    #[default]
    All,
    Last,
}

/// Attention of one real edge, reduced over layers and heads by maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeScore {
    pub service_day: NaiveDate,
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub score: f64,
}

/// Max score per edge, self-loops dropped, sorted by (src, dst, type).
pub fn reduce_attention(
    day: NaiveDate,
    records: &[AttentionRecord],
    pool: LayerPool,
) -> Vec<EdgeScore> {
    let last = records.iter().map(|r| r.layer).max().unwrap_or(0);
    let mut best: BTreeMap<(usize, usize, EdgeType), f64> = BTreeMap::new();
    for r in records {
        let Some(ty) = r.edge_type else { continue };
        if pool == LayerPool::Last && r.layer != last {
            continue;
        }
        let e = best
            .entry((r.edge_src, r.edge_dst, ty))
            .or_insert(f64::NEG_INFINITY);
        *e = e.max(r.score);
    }
    best.into_iter()
        .map(|((src, dst, edge_type), score)| EdgeScore {
            service_day: day,
            src,
            dst,
            edge_type,
            score,
        })
        .collect()
}

/// Sum of attention over each (layer, head, destination) distribution,
/// self-loops included.
pub fn attention_sums(records: &[AttentionRecord]) -> Vec<f64> {
    let mut sums: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for r in records {
        *sums.entry((r.layer, r.head, r.edge_dst)).or_default() += r.score;
    }
    sums.into_values().collect()
}

/// Linear-interpolation percentile (`p` in [0, 100]) of non-empty `values`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TypeSummary {
    pub edges: usize,
    pub high_edges: usize,
    /// Share of the high-attention group.
    pub high_proportion: f64,
    /// Share of all scored edges.
    pub overall_proportion: f64,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureComparison {
    pub feature: String,
    pub low_mean: Option<f64>,
    pub high_mean: Option<f64>,
    pub low_median: Option<f64>,
    pub high_median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionAnalysis {
    pub percentile: f64,
    pub threshold: f64,
    pub edges: usize,
    pub high_edges: usize,
    pub types: BTreeMap<String, TypeSummary>,
    pub features: Vec<FeatureComparison>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pct(v: &[f64], p: f64) -> Option<f64> {
    (!v.is_empty()).then(|| percentile(v, p))
}

/// High-attention group = edges scoring at or above the `pct`-th percentile.
/// `features` holds per-edge values aligned with `scores`.
pub fn attention_analysis(
    scores: &[EdgeScore],
    pct_level: f64,
    features: &[(String, Vec<f64>)],
) -> Result<AttentionAnalysis> {
    if scores.is_empty() {
        return Err(Error::Config(
            "attention analysis needs at least one scored edge".into(),
        ));
    }
    if let Some((name, _)) = features.iter().find(|(_, v)| v.len() != scores.len()) {
        return Err(Error::Config(format!(
            "feature `{name}` is not aligned with the scored edges"
        )));
    }
    let all: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let threshold = percentile(&all, pct_level);
    let high: Vec<bool> = all.iter().map(|&s| s >= threshold).collect();
    let high_edges = high.iter().filter(|&&h| h).count();

    let mut types = BTreeMap::new();
    for ty in EdgeType::ALL {
        let idx: Vec<usize> = (0..scores.len())
            .filter(|&i| scores[i].edge_type == ty)
            .collect();
        let vals: Vec<f64> = idx.iter().map(|&i| all[i]).collect();
        let in_high = idx.iter().filter(|&&i| high[i]).count();
        types.insert(
            ty.as_str().to_string(),
            TypeSummary {
                edges: idx.len(),
                high_edges: in_high,
                high_proportion: in_high as f64 / high_edges as f64,
                overall_proportion: idx.len() as f64 / scores.len() as f64,
                mean: mean(&vals),
                median: pct(&vals, 50.0),
                p95: pct(&vals, 95.0),
                max: vals.iter().copied().reduce(f64::max),
            },
        );
    }

    let features = features
        .iter()
        .map(|(name, v)| {
            let pick = |h: bool| -> Vec<f64> {
                v.iter()
                    .zip(&high)
                    .filter(|(_, &g)| g == h)
                    .map(|(&x, _)| x)
                    .collect()
            };
            let (hi, lo) = (pick(true), pick(false));
            FeatureComparison {
                feature: name.clone(),
                low_mean: mean(&lo),
                high_mean: mean(&hi),
                low_median: pct(&lo, 50.0),
                high_median: pct(&hi, 50.0),
            }
        })
        .collect();

    Ok(AttentionAnalysis {
        percentile: pct_level,
        threshold,
        edges: scores.len(),
        high_edges,
        types,
        features,
    })
}

/// Source-node features compared between low and high attention.
pub const COMPARISON_FEATURES: [&str; 6] = [
    "lag2_delay",
    "train_count_last_60min",
    "minutes_since_last_train_clipped",
    "inbound_trains_near_arrival",
    "number_of_stops_left",
    "edge_duration_scheduled",
];

/// Values of [`COMPARISON_FEATURES`] for every scored edge, looked up in the
/// day graphs. Node features describe the edge's source event.
pub fn edge_feature_table(
    scores: &[EdgeScore],
    graphs: &[EventGraph],
) -> Result<Vec<(String, Vec<f64>)>> {
    let by_day: HashMap<NaiveDate, &EventGraph> =
        graphs.iter().map(|g| (g.service_day, g)).collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(scores.len()); COMPARISON_FEATURES.len()];
    let mut durations: HashMap<NaiveDate, HashMap<(usize, usize, EdgeType), f64>> = HashMap::new();
    for s in scores {
        let g = by_day.get(&s.service_day).ok_or_else(|| {
            Error::DataIntegrity(format!("no graph for attention day {}", s.service_day))
        })?;
        let n = g.nodes.get(s.src).ok_or_else(|| {
            Error::DataIntegrity(format!(
                "attention edge source {} outside graph {}",
                s.src, s.service_day
            ))
        })?;
        let dur = durations.entry(s.service_day).or_insert_with(|| {
            g.edges
                .iter()
                .map(|e| ((e.src, e.dst, e.edge_type), e.duration_scheduled))
                .collect()
        });
        let f = &n.features;
        let row = [
            f.lag2_delay,
            f64::from(f.train_count_last_60min),
            f.minutes_since_last_train_clipped,
            f64::from(f.inbound_trains_near_arrival),
            f64::from(f.number_of_stops_left),
            *dur.get(&(s.src, s.dst, s.edge_type)).ok_or_else(|| {
                Error::DataIntegrity(format!(
                    "attention edge {}->{} not in graph {}",
                    s.src, s.dst, s.service_day
                ))
            })?,
        ];
        for (c, v) in cols.iter_mut().zip(row) {
            c.push(v);
        }
    }
    Ok(COMPARISON_FEATURES
        .iter()
        .map(|s| s.to_string())
        .zip(cols)
        .collect())
}
