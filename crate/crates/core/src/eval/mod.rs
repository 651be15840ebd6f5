//! Scores, per-horizon curves and explainability reports over prediction logs.

mod attention;
mod epe;
mod importance;
pub mod plot;
mod subgroup;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::PredictionRow;

pub use attention::{
    attention_analysis, attention_sums, edge_feature_table, percentile, reduce_attention,
    AttentionAnalysis, EdgeScore, FeatureComparison, LayerPool, TypeSummary, COMPARISON_FEATURES,
};
pub use epe::{
    epe, epe_classification, epe_report, propagation_overlap, EdgeTypeEpe, EpeReport,
    PropagationOverlap, CHANGE_TOLERANCE,
};
pub use importance::{permutation_importance, FeatureImportance, FeatureImportanceReport};
pub use subgroup::{subgroup_eval, Bucket, SubgroupConfig, SubgroupReport, MAGNITUDE_BINS};

/// Confusion-matrix scores; undefined ratios are reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassScores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Scores from (predicted positive, actually positive) pairs.
pub fn confusion(pairs: impl IntoIterator<Item = (bool, bool)>) -> ClassScores {
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for pair in pairs {
        match pair {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassScores {
        accuracy: ratio(tp + tn, tp + fp + fneg + tn),
        precision,
        recall,
        f1,
    }
}

fn check_aligned(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Config(format!(
            "{} predictions for {} truths",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("metrics need at least one prediction".into()));
    }
    Ok(())
}

/// (MAE, RMSE) in minutes.
pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    check_aligned(pred, truth)?;
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
    }
    Ok((abs / n, (sq / n).sqrt()))
}

/// Delay-occurrence scores: an event is positive iff its delay exceeds
/// `threshold` minutes.
pub fn classification_metrics(pred: &[f64], truth: &[f64], threshold: f64) -> Result<ClassScores> {
    check_aligned(pred, truth)?;
    Ok(confusion(
        pred.iter()
            .zip(truth)
            .map(|(p, t)| (*p > threshold, *t > threshold)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    let (mae, rmse) = regression_metrics(pred, truth)?;
    let c = classification_metrics(pred, truth, 0.0)?;
    Ok(Metrics {
        count: pred.len(),
        mae,
        rmse,
        accuracy: c.accuracy,
        precision: c.precision,
        recall: c.recall,
        f1: c.f1,
    })
}

pub fn row_metrics<'a>(rows: impl IntoIterator<Item = &'a PredictionRow>) -> Result<Metrics> {
    let (pred, truth): (Vec<f64>, Vec<f64>) = rows
        .into_iter()
        .map(|r| (r.pred_delay, r.true_delay))
        .unzip();
    metrics(&pred, &truth)
}

/// Metrics per horizon step; entries are `None` for steps without events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub count: Vec<usize>,
    pub mae: Vec<Option<f64>>,
    pub rmse: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub f1: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub overall: Metrics,
    pub per_horizon: HorizonMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub k: usize,
    pub models: BTreeMap<String, ModelMetrics>,
}

/// Overall and per-step metrics for every model in the log.
pub fn per_horizon_metrics(rows: &[PredictionRow], k: usize) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::Config("horizon k must be positive".into()));
    }
    let mut report = MetricsReport {
        k,
        models: BTreeMap::new(),
    };
    for (model, rows) in crate::forecast::by_model(rows) {
        if let Some(r) = rows.iter().find(|r| r.step_k >= k) {
            return Err(Error::Config(format!(
                "{model}: step {} outside horizon {k}",
                r.step_k
            )));
        }
        let overall = row_metrics(rows.iter().copied())?;
        let mut h = HorizonMetrics::default();
        for s in 0..k {
            let step: Vec<&PredictionRow> =
                rows.iter().copied().filter(|r| r.step_k == s).collect();
            h.count.push(step.len());
            let m = if step.is_empty() {
                None
            } else {
                Some(row_metrics(step)?)
            };
            h.mae.push(m.map(|m| m.mae));
            h.rmse.push(m.map(|m| m.rmse));
            h.accuracy.push(m.map(|m| m.accuracy));
            h.precision.push(m.map(|m| m.precision));
            h.recall.push(m.map(|m| m.recall));
            h.f1.push(m.map(|m| m.f1));
        }
        report.models.insert(
            model.to_string(),
            ModelMetrics {
                overall,
                per_horizon: h,
            },
        );
    }
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

impl MetricsReport {
    /// Tabular form with one overall row (`step` = `all`) and one row per step.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,step,count,mae,rmse,accuracy,precision,recall,f1\n");
        for (name, m) in &self.models {
            let o = &m.overall;
            writeln!(
                out,
                "{name},all,{},{},{},{},{},{},{}",
                o.count, o.mae, o.rmse, o.accuracy, o.precision, o.recall, o.f1
            )
            .expect("string write");
            let h = &m.per_horizon;
            for s in 0..self.k {
                writeln!(
                    out,
                    "{name},{s},{},{},{},{},{},{},{}",
                    h.count[s],
                    opt(h.mae[s]),
                    opt(h.rmse[s]),
                    opt(h.accuracy[s]),
                    opt(h.precision[s]),
                    opt(h.recall[s]),
                    opt(h.f1[s])
                )
                .expect("string write");
            }
        }
        out
    }
}
