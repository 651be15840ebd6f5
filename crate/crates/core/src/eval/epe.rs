//! Edge Propagation Error: how well a model reproduces the change in delay
//! across each dependency.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{confusion, ClassScores};
use crate::forecast::{EdgeRef, EventKey, EventMeta, PredictionRow};
use crate::graph::EdgeType;
use crate::ingest::PropagationEvent;

/// Minimum absolute change, in minutes, that counts as a delay change.
pub const CHANGE_TOLERANCE: f64 = 0.5;

/// |(true_j − true_i) − (pred_j − pred_i)| for an edge i → j.
pub fn epe(true_i: f64, true_j: f64, pred_i: f64, pred_j: f64) -> f64 {
    ((true_j - true_i) - (pred_j - pred_i)).abs()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeTypeEpe {
    /// Edges with both endpoints predicted.
    pub edges: usize,
    /// Edges skipped because an endpoint was not a prediction target.
    pub skipped: usize,
    pub epe_mae: Option<f64>,
    pub change: ClassScores,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpeReport {
    pub change_tolerance: f64,
    /// model → edge type → scores.
    pub models: BTreeMap<String, BTreeMap<String, EdgeTypeEpe>>,
}

type Values = HashMap<EventKey, (f64, f64)>;

fn values_of<'a>(rows: impl IntoIterator<Item = &'a PredictionRow>) -> Values {
    rows.into_iter()
        .map(|r| (r.key(), (r.true_delay, r.pred_delay)))
        .collect()
}

fn endpoints(e: &EdgeRef, v: &Values) -> Option<((f64, f64), (f64, f64))> {
    Some((*v.get(&e.src)?, *v.get(&e.dst)?))
}

/// Change-across-edge scores per edge type for one model's (true, pred)
/// values. An edge is positive iff its absolute delay change exceeds `tol`.
pub fn epe_classification(
    edges: &[EdgeRef],
    values: &Values,
    tol: f64,
) -> BTreeMap<EdgeType, ClassScores> {
    EdgeType::ALL
        .iter()
        .map(|&ty| {
            let pairs = edges
                .iter()
                .filter(|e| e.edge_type == ty)
                .filter_map(|e| endpoints(e, values))
                .map(|((ti, pi), (tj, pj))| ((pj - pi).abs() > tol, (tj - ti).abs() > tol));
            (ty, confusion(pairs))
        })
        .collect()
}

fn type_epe(edges: &[EdgeRef], values: &Values, ty: EdgeType, tol: f64) -> EdgeTypeEpe {
    let mut out = EdgeTypeEpe::default();
    let mut sum = 0.0;
    let mut pairs = Vec::new();
    for e in edges.iter().filter(|e| e.edge_type == ty) {
        match endpoints(e, values) {
            Some(((ti, pi), (tj, pj))) => {
                out.edges += 1;
                sum += epe(ti, tj, pi, pj);
                pairs.push(((pj - pi).abs() > tol, (tj - ti).abs() > tol));
            }
            None => out.skipped += 1,
        }
    }
    out.epe_mae = (out.edges > 0).then(|| sum / out.edges as f64);
    out.change = confusion(pairs);
    out
}

/// EPE-MAE and change classification per model and edge type.
pub fn epe_report(edges: &[EdgeRef], rows: &[PredictionRow], tol: f64) -> EpeReport {
    let mut report = EpeReport {
        change_tolerance: tol,
        models: BTreeMap::new(),
    };
    for (model, rows) in crate::forecast::by_model(rows) {
        let values = values_of(rows);
        let per_type = EdgeType::ALL
            .iter()
            .map(|&ty| (ty.as_str().to_string(), type_epe(edges, &values, ty, tol)))
            .collect();
        report.models.insert(model.to_string(), per_type);
    }
    report
}

impl EpeReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,edge_type,edges,skipped,epe_mae,accuracy,precision,recall,f1\n");
        for (model, types) in &self.models {
            for (ty, e) in types {
                writeln!(
                    out,
                    "{model},{ty},{},{},{},{},{},{},{}",
                    e.edges,
                    e.skipped,
                    e.epe_mae.map_or_else(String::new, |v| v.to_string()),
                    e.change.accuracy,
                    e.change.precision,
                    e.change.recall,
                    e.change.f1
                )
                .expect("string write");
            }
        }
        out
    }
}

/// Agreement between a model's predicted Headway changes and the generator's
/// logged propagation events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PropagationOverlap {
    /// Evaluated Headway edges carrying a logged propagation event.
    pub ground_truth_edges: usize,
    /// Of those, edges the model flags as a delay change.
    pub predicted_positive: usize,
    /// Evaluated Headway edges the model flags as a delay change.
    pub model_positive: usize,
    /// `predicted_positive / ground_truth_edges`.
    pub overlap: Option<f64>,
}

/// Share of ground-truth propagation edges (among Headway edges with both
/// endpoints predicted) that the model flags as a delay change.
pub fn propagation_overlap(
    edges: &[EdgeRef],
    rows: &[PredictionRow],
    meta: &[EventMeta],
    events: &[PropagationEvent],
    tol: f64,
) -> PropagationOverlap {
    let values = values_of(rows);
    let station: HashMap<EventKey, &str> =
        meta.iter().map(|m| (m.key(), m.station.as_str())).collect();
    let logged: HashSet<(&str, &str, &str)> = events
        .iter()
        .map(|e| (e.from_trip.as_str(), e.to_trip.as_str(), e.station.as_str()))
        .collect();
    let mut out = PropagationOverlap::default();
    for e in edges.iter().filter(|e| e.edge_type == EdgeType::Headway) {
        let Some(((_, pi), (_, pj))) = endpoints(e, &values) else {
            continue;
        };
        let flagged = (pj - pi).abs() > tol;
        out.model_positive += usize::from(flagged);
        let Some(&s) = station.get(&e.dst) else {
            continue;
        };
        if logged.contains(&(e.src.1.as_str(), e.dst.1.as_str(), s)) {
            out.ground_truth_edges += 1;
            out.predicted_positive += usize::from(flagged);
        }
    }
    out.overlap = (out.ground_truth_edges > 0)
        .then(|| out.predicted_positive as f64 / out.ground_truth_edges as f64);
    out
}
