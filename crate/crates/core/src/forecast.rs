//! Live k-step inference and the non-learned baselines.
//!
//! Every model forecasts the same rollout plans: one per tile of `k` slices,
//! with the realization cutoff at the earliest anchor. The autoregressive
//! models write their predictions into the rollout state after each step;
//! the one-shot GCN sees only the realized history at the origin.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    extract_consistent_subgraph, extract_with, plan_rollouts, EdgeType, EventGraph, EventKind,
    FeaturePermutation, RolloutPlan, RolloutState, SubgraphView,
};
use crate::model::{hurdle_combine, GraphInput, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub k: usize,
    pub slice_minutes: i64,
    /// In-neighborhood hops; must cover the model's layers.
    pub depth: usize,
    pub threshold: f64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            k: 10,
            slice_minutes: 10,
            depth: 3,
            threshold: 0.5,
        }
    }
}

/// One attention weight of an edge entering an anchor. Endpoints are node ids
/// of the day graph; `edge_type` is `None` for self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub edge_src: usize,
    pub edge_dst: usize,
    pub edge_type: Option<EdgeType>,
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub node: usize,
    pub step: usize,
    pub truth: f64,
    pub pred: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayForecast {
    pub service_day: NaiveDate,
    pub model: String,
    pub predictions: Vec<Prediction>,
    pub attention: Vec<AttentionRecord>,
}

/// Per-step predictor used by the autoregressive rollout.
pub trait StepPredictor: Sync {
    /// Delay in minutes for each anchor of `view`, plus attention on anchor
    /// in-edges when `capture` is set.
    fn predict(
        &self,
        graph: &EventGraph,
        view: &SubgraphView,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)>;
}

/// GATv2 classifier gating a GATv2 regressor. Attention comes from the
/// classifier.
pub struct Hurdle<'a> {
    pub classifier: &'a Network,
    pub regressor: &'a Network,
    pub threshold: f64,
}

impl StepPredictor for Hurdle<'_> {
    fn predict(
        &self,
        _graph: &EventGraph,
        view: &SubgraphView,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let inp = GraphInput::from_view(view)?;
        let cls = self.classifier.forward(&inp)?;
        let reg = self.regressor.forward(&inp)?;
        let out = hurdle_combine(&cls.output, &reg.output, self.threshold);
        let attention = if capture {
            anchor_attention(view, &inp, &cls.attention())
        } else {
            Vec::new()
        };
        Ok((out.column(0).to_vec(), attention))
    }
}

/// Returns the true delay of every anchor; used for pipeline identity checks.
pub struct TruthPredictor;

impl StepPredictor for TruthPredictor {
    fn predict(
        &self,
        graph: &EventGraph,
        view: &SubgraphView,
        _capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        Ok((
            view.anchors
                .iter()
                .map(|&a| graph.nodes[view.nodes[a]].target_delay)
                .collect(),
            Vec::new(),
        ))
    }
}

fn anchor_attention(
    view: &SubgraphView,
    inp: &GraphInput,
    alphas: &[&ndarray::Array2<f64>],
) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for (layer, alpha) in alphas.iter().enumerate() {
        for &a in &view.anchors {
            for &k in inp.incoming(a) {
                for head in 0..alpha.ncols() {
                    out.push(AttentionRecord {
                        edge_src: view.nodes[inp.src[k]],
                        edge_dst: view.nodes[inp.dst[k]],
                        edge_type: inp.edge_type[k],
                        layer,
                        head,
                        score: alpha[[k, head]],
                    });
                }
            }
        }
    }
    out
}

pub fn plans_for(graph: &EventGraph, cfg: &ForecastConfig) -> Vec<RolloutPlan> {
    plan_rollouts(graph, cfg.k, cfg.slice_minutes)
}

/// Roll one plan forward from its origin, feeding each step's predictions
/// into the state seen by the next.
pub fn rollout_plan(
    graph: &EventGraph,
    plan: &RolloutPlan,
    predictor: &dyn StepPredictor,
    depth: usize,
    capture_attention: bool,
    permutation: Option<&FeaturePermutation>,
) -> Result<(Vec<Prediction>, Vec<AttentionRecord>)> {
    let mut predictions = Vec::new();
    let mut attention = Vec::new();
    let mut state = RolloutState::new(graph, plan.origin);
    for (s, anchors) in plan.steps.iter().enumerate() {
        if anchors.is_empty() {
            state.update(graph, &[])?;
            continue;
        }
        let view = extract_with(graph, anchors, &state, depth, permutation)?;
        let (pred, att) = predictor.predict(graph, &view, capture_attention)?;
        if pred.len() != anchors.len() {
            return Err(Error::State(format!(
                "{} predictions for {} anchors",
                pred.len(),
                anchors.len()
            )));
        }
        attention.extend(att);
        let mut updates = Vec::with_capacity(anchors.len());
        for (&a, &p) in anchors.iter().zip(&pred) {
            predictions.push(Prediction {
                node: a,
                step: s,
                truth: graph.nodes[a].target_delay,
                pred: p,
            });
            updates.push((a, p));
        }
        state.update(graph, &updates)?;
    }
    Ok((predictions, attention))
}

/// Sequentially consistent autoregressive forecast of one day.
pub fn live_rollout(
    graph: &EventGraph,
    predictor: &dyn StepPredictor,
    model: &str,
    cfg: &ForecastConfig,
    capture_attention: bool,
    permutation: Option<&FeaturePermutation>,
) -> Result<DayForecast> {
    let mut predictions = Vec::new();
    let mut attention = Vec::new();
    for plan in plans_for(graph, cfg) {
        let (p, a) = rollout_plan(
            graph,
            &plan,
            predictor,
            cfg.depth,
            capture_attention,
            permutation,
        )?;
        predictions.extend(p);
        attention.extend(a);
    }
    Ok(DayForecast {
        service_day: graph.service_day,
        model: model.to_string(),
        predictions,
        attention,
    })
}

/// One-shot GCN hurdle forecast: a single forward pass per network and plan,
/// head s answering step s.
pub fn gcn_oneshot_forecast(
    graph: &EventGraph,
    classifier: &Network,
    regressor: &Network,
    model: &str,
    cfg: &ForecastConfig,
) -> Result<DayForecast> {
    for net in [classifier, regressor] {
        if net.spec.outputs != cfg.k {
            return Err(Error::Config(format!(
                "one-shot model has {} heads, forecast uses k = {}",
                net.spec.outputs, cfg.k
            )));
        }
    }
    let mut predictions = Vec::new();
    for plan in plans_for(graph, cfg) {
        let anchors: Vec<(usize, usize)> = plan.anchors().collect();
        if anchors.is_empty() {
            continue;
        }
        let state = RolloutState::new(graph, plan.origin);
        let nodes: Vec<usize> = anchors.iter().map(|&(_, v)| v).collect();
        let view = extract_consistent_subgraph(graph, &nodes, &state, cfg.depth)?;
        let inp = GraphInput::from_view(&view)?;
        let out = hurdle_combine(
            &classifier.forward(&inp)?.output,
            &regressor.forward(&inp)?.output,
            cfg.threshold,
        );
        for (r, &(s, v)) in anchors.iter().enumerate() {
            predictions.push(Prediction {
                node: v,
                step: s,
                truth: graph.nodes[v].target_delay,
                pred: out[[r, s]],
            });
        }
    }
    predictions.sort_by_key(|p| (p.step, p.node));
    Ok(DayForecast {
        service_day: graph.service_day,
        model: model.to_string(),
        predictions: order_like_rollout(graph, cfg, predictions),
        attention: Vec::new(),
    })
}

/// Reorder predictions to the (plan, step, anchor) order of the rollouts.
fn order_like_rollout(
    graph: &EventGraph,
    cfg: &ForecastConfig,
    preds: Vec<Prediction>,
) -> Vec<Prediction> {
    let by_node: HashMap<usize, Prediction> = preds.into_iter().map(|p| (p.node, p)).collect();
    plans_for(graph, cfg)
        .iter()
        .flat_map(|plan| plan.anchors().map(|(_, v)| by_node[&v]).collect::<Vec<_>>())
        .collect()
}

/// Last realized delay two stops before each trip's first unrealized stop at
/// the origin, held constant over the horizon; 0 when unavailable.
/// Persistence forecast of one plan: every anchor of a trip gets the delay
/// its trip had departing two stops before the first unrealized stop.
pub fn persistence_plan(graph: &EventGraph, plan: &RolloutPlan) -> Vec<Prediction> {
    let state = RolloutState::new(graph, plan.origin);
    let mut first_open: HashMap<usize, u32> = HashMap::new();
    for n in &graph.nodes {
        if !state.is_realized(n.id) {
            let e = first_open.entry(n.trip).or_insert(n.stop_index);
            *e = (*e).min(n.stop_index);
        }
    }
    let departure = |trip: usize, stop: u32| {
        graph
            .nodes
            .iter()
            .find(|n| n.trip == trip && n.stop_index == stop && n.kind == EventKind::Departure)
            .map(|n| n.id)
    };
    let mut memo: HashMap<usize, f64> = HashMap::new();
    plan.anchors()
        .map(|(s, v)| {
            let trip = graph.nodes[v].trip;
            let pred = *memo.entry(trip).or_insert_with(|| {
                first_open
                    .get(&trip)
                    .and_then(|&i0| i0.checked_sub(2))
                    .and_then(|i| departure(trip, i))
                    .filter(|&d| state.is_realized(d))
                    .map_or(0.0, |d| state.delay[d])
            });
            Prediction {
                node: v,
                step: s,
                truth: graph.nodes[v].target_delay,
                pred,
            }
        })
        .collect()
}

pub fn persistence_baseline(graph: &EventGraph, cfg: &ForecastConfig) -> DayForecast {
    let predictions = plans_for(graph, cfg)
        .iter()
        .flat_map(|plan| persistence_plan(graph, plan))
        .collect();
    DayForecast {
        service_day: graph.service_day,
        model: "persistence".into(),
        predictions,
        attention: Vec::new(),
    }
}

pub fn zero_baseline(graph: &EventGraph, cfg: &ForecastConfig) -> DayForecast {
    let predictions = plans_for(graph, cfg)
        .iter()
        .flat_map(|plan| {
            plan.anchors()
                .map(|(s, v)| Prediction {
                    node: v,
                    step: s,
                    truth: graph.nodes[v].target_delay,
                    pred: 0.0,
                })
                .collect::<Vec<_>>()
        })
        .collect();
    DayForecast {
        service_day: graph.service_day,
        model: "zero".into(),
        predictions,
        attention: Vec::new(),
    }
}

/// `n` distinct held-out days in seeded random order.
pub fn sample_test_days(
    held_out: &[NaiveDate],
    training: &[NaiveDate],
    n: usize,
    seed: u64,
) -> Result<Vec<NaiveDate>> {
    let mut pool: Vec<NaiveDate> = held_out
        .iter()
        .filter(|d| !training.contains(d))
        .copied()
        .collect();
    pool.sort();
    pool.dedup();
    if pool.len() < n {
        return Err(Error::Config(format!(
            "need {n} held-out days, only {} available",
            pool.len()
        )));
    }
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pool.truncate(n);
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Logs

/// Key of one event across files: (day, trip, stop, kind).
pub type EventKey = (NaiveDate, String, u32, EventKind);

pub fn event_key(graph: &EventGraph, node: usize) -> EventKey {
    let n = &graph.nodes[node];
    (
        graph.service_day,
        graph.trip_id(node).to_string(),
        n.stop_index,
        n.kind,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub service_day: NaiveDate,
    pub trip_id: String,
    pub stop_index: u32,
    pub event_kind: EventKind,
    pub step_k: usize,
    pub true_delay: f64,
    pub pred_delay: f64,
    pub model_name: String,
}

impl PredictionRow {
    pub fn key(&self) -> EventKey {
        (
            self.service_day,
            self.trip_id.clone(),
            self.stop_index,
            self.event_kind,
        )
    }
}

pub fn prediction_rows(graph: &EventGraph, fc: &DayForecast) -> Vec<PredictionRow> {
    fc.predictions
        .iter()
        .map(|p| PredictionRow {
            service_day: fc.service_day,
            trip_id: graph.trip_id(p.node).to_string(),
            stop_index: graph.nodes[p.node].stop_index,
            event_kind: graph.nodes[p.node].kind,
            step_k: p.step,
            true_delay: p.truth,
            pred_delay: p.pred,
            model_name: fc.model.clone(),
        })
        .collect()
}

pub const PREDICTION_HEADER: &str =
    "service_day,trip_id,stop_index,event_kind,step_k,true_delay,pred_delay,model_name";

pub fn write_prediction_log(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::with_capacity(rows.len() * 64);
    out.push_str(PREDICTION_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.service_day,
            r.trip_id,
            r.stop_index,
            r.event_kind.as_str(),
            r.step_k,
            r.true_delay,
            r.pred_delay,
            r.model_name
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_prediction_log(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != PREDICTION_HEADER {
        return Err(Error::MalformedRow {
            row: 1,
            message: format!("{}: expected header `{PREDICTION_HEADER}`", path.display()),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::MalformedRow {
            row: i + 2,
            message: format!("{}: {m}", path.display()),
        };
        let f = |c: usize| rec.get(c).ok_or_else(|| bad("short row"));
        rows.push(PredictionRow {
            service_day: f(0)?.parse().map_err(|_| bad("bad date"))?,
            trip_id: f(1)?.to_string(),
            stop_index: f(2)?.parse().map_err(|_| bad("bad stop_index"))?,
            event_kind: EventKind::parse(f(3)?).ok_or_else(|| bad("bad event_kind"))?,
            step_k: f(4)?.parse().map_err(|_| bad("bad step_k"))?,
            true_delay: f(5)?.parse().map_err(|_| bad("bad true_delay"))?,
            pred_delay: f(6)?.parse().map_err(|_| bad("bad pred_delay"))?,
            model_name: f(7)?.to_string(),
        });
    }
    Ok(rows)
}

pub const ATTENTION_HEADER: &str = "edge_src,edge_dst,edge_type,layer,head,score";

pub fn edge_type_label(t: Option<EdgeType>) -> &'static str {
    t.map_or("SelfLoop", EdgeType::as_str)
}

pub fn write_attention_log(path: &Path, records: &[AttentionRecord]) -> Result<()> {
    let mut out = String::with_capacity(records.len() * 40);
    out.push_str(ATTENTION_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.edge_src,
            r.edge_dst,
            edge_type_label(r.edge_type),
            r.layer,
            r.head,
            r.score
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_attention_log(path: &Path) -> Result<Vec<AttentionRecord>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::MalformedRow {
            row: i + 2,
            message: format!("{}: {m}", path.display()),
        };
        let f = |c: usize| rec.get(c).ok_or_else(|| bad("short row"));
        let ty = f(2)?;
        out.push(AttentionRecord {
            edge_src: f(0)?.parse().map_err(|_| bad("bad edge_src"))?,
            edge_dst: f(1)?.parse().map_err(|_| bad("bad edge_dst"))?,
            edge_type: if ty == "SelfLoop" {
                None
            } else {
                Some(EdgeType::parse(ty).ok_or_else(|| bad("bad edge_type"))?)
            },
            layer: f(3)?.parse().map_err(|_| bad("bad layer"))?,
            head: f(4)?.parse().map_err(|_| bad("bad head"))?,
            score: f(5)?.parse().map_err(|_| bad("bad score"))?,
        });
    }
    Ok(out)
}

/// Context of every event, joined onto predictions by subgroup evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMeta {
    pub service_day: NaiveDate,
    pub trip_id: String,
    pub stop_index: u32,
    pub event_kind: EventKind,
    pub station: String,
    pub train_type: String,
    pub is_peak: bool,
    pub is_weekend: bool,
    pub is_holiday: bool,
}

impl EventMeta {
    pub fn key(&self) -> EventKey {
        (
            self.service_day,
            self.trip_id.clone(),
            self.stop_index,
            self.event_kind,
        )
    }
}

pub fn event_metadata(graph: &EventGraph) -> Vec<EventMeta> {
    graph
        .nodes
        .iter()
        .map(|n| EventMeta {
            service_day: graph.service_day,
            trip_id: graph.trip_id(n.id).to_string(),
            stop_index: n.stop_index,
            event_kind: n.kind,
            station: n.station.clone(),
            train_type: graph.train_type(n.id).to_string(),
            is_peak: n.features.is_peak,
            is_weekend: n.features.is_weekend,
            is_holiday: n.features.is_holiday,
        })
        .collect()
}

/// One edge of a day graph with endpoints as event keys.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRef {
    pub src: EventKey,
    pub dst: EventKey,
    pub edge_type: EdgeType,
}

pub fn edge_refs(graph: &EventGraph) -> Vec<EdgeRef> {
    graph
        .edges
        .iter()
        .map(|e| EdgeRef {
            src: event_key(graph, e.src),
            dst: event_key(graph, e.dst),
            edge_type: e.edge_type,
        })
        .collect()
}

/// Write events metadata as CSV.
pub fn write_event_metadata(path: &Path, meta: &[EventMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
    for m in meta {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_event_metadata(path: &Path) -> Result<Vec<EventMeta>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub const EDGE_LOG_HEADER: &str =
    "service_day,src_trip,src_stop,src_kind,dst_trip,dst_stop,dst_kind,edge_type";

pub fn write_edge_log(path: &Path, edges: &[EdgeRef]) -> Result<()> {
    let mut out = String::from(EDGE_LOG_HEADER);
    out.push('\n');
    for e in edges {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.src.0,
            e.src.1,
            e.src.2,
            e.src.3.as_str(),
            e.dst.1,
            e.dst.2,
            e.dst.3.as_str(),
            e.edge_type
        )
        .expect("string write");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_edge_log(path: &Path) -> Result<Vec<EdgeRef>> {
    let mut rdr =
        csv::Reader::from_path(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::MalformedRow {
            row: i + 2,
            message: format!("{}: {m}", path.display()),
        };
        let f = |c: usize| rec.get(c).ok_or_else(|| bad("short row"));
        let day: NaiveDate = f(0)?.parse().map_err(|_| bad("bad date"))?;
        let kind = |c: usize| EventKind::parse(f(c)?).ok_or_else(|| bad("bad kind"));
        out.push(EdgeRef {
            src: (
                day,
                f(1)?.to_string(),
                f(2)?.parse().map_err(|_| bad("bad stop"))?,
                kind(3)?,
            ),
            dst: (
                day,
                f(4)?.to_string(),
                f(5)?.parse().map_err(|_| bad("bad stop"))?,
                kind(6)?,
            ),
            edge_type: EdgeType::parse(f(7)?).ok_or_else(|| bad("bad edge_type"))?,
        });
    }
    Ok(out)
}

/// Group prediction rows by model name (sorted).
pub fn by_model(rows: &[PredictionRow]) -> BTreeMap<&str, Vec<&PredictionRow>> {
    let mut out: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.model_name.as_str()).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureConfig;
    use crate::ingest::{clean, generate_synthetic, group_by_day, CleaningConfig, SyntheticConfig};
    use crate::model::{Architecture, GatBodyConfig, ModelSpec, Stage};
    use crate::train::fit_preprocessor;

    fn graph() -> EventGraph {
        let cfg = SyntheticConfig {
            station_count: 10,
            trips_per_day: 16,
            day_count: 1,
            primary_delay_rate: 0.2,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let (trips, _) = clean(ds.records, &CleaningConfig::default());
        let mut g = EventGraph::build(
            &group_by_day(trips).into_values().next().unwrap(),
            &FeatureConfig::default(),
        )
        .unwrap();
        let pre = fit_preprocessor(std::slice::from_ref(&g)).unwrap();
        g.encode(&pre);
        g
    }

    fn net(stage: Stage, arch: Architecture, outputs: usize, seed: u64) -> Network {
        let body = GatBodyConfig {
            layers: 2,
            hidden_channels: 6,
            attention_heads: 2,
            embedding_dims: [2; 5],
            ..Default::default()
        };
        Network::new(
            ModelSpec {
                architecture: arch,
                stage,
                body,
                outputs,
                categorical_sizes: [7, 13, 3, 11, 3],
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn truth_stub_reproduces_true_delays() {
        let g = graph();
        let cfg = ForecastConfig {
            k: 5,
            depth: 2,
            ..Default::default()
        };
        let fc = live_rollout(&g, &TruthPredictor, "truth", &cfg, false, None).unwrap();
        assert!(!fc.predictions.is_empty());
        assert!(fc.predictions.iter().all(|p| p.pred == p.truth));
    }

    #[test]
    fn every_model_forecasts_the_same_events() {
        let g = graph();
        let cfg = ForecastConfig {
            k: 4,
            depth: 2,
            ..Default::default()
        };
        let (c, r) = (
            net(Stage::Classifier, Architecture::Gatv2, 1, 1),
            net(Stage::Regressor, Architecture::Gatv2, 1, 2),
        );
        let hurdle = Hurdle {
            classifier: &c,
            regressor: &r,
            threshold: 0.5,
        };
        let gat = live_rollout(&g, &hurdle, "gatv2", &cfg, true, None).unwrap();
        let (gc, gr) = (
            net(Stage::Classifier, Architecture::Gcn, 4, 3),
            net(Stage::Regressor, Architecture::Gcn, 4, 4),
        );
        let gcn = gcn_oneshot_forecast(&g, &gc, &gr, "gcn", &cfg).unwrap();
        let keys = |f: &DayForecast| {
            f.predictions
                .iter()
                .map(|p| (p.node, p.step))
                .collect::<Vec<_>>()
        };
        assert_eq!(keys(&gat), keys(&gcn));
        assert_eq!(keys(&gat), keys(&persistence_baseline(&g, &cfg)));
        assert_eq!(keys(&gat), keys(&zero_baseline(&g, &cfg)));
        let plans = plans_for(&g, &cfg)
            .iter()
            .filter(|p| p.anchors().next().is_some())
            .count();
        assert_eq!(gc.forward_calls(), plans);
        assert_eq!(gr.forward_calls(), plans);
        assert!(!gat.attention.is_empty());
    }

    #[test]
    fn k_one_matches_single_prediction() {
        let g = graph();
        let cfg = ForecastConfig {
            k: 1,
            depth: 2,
            ..Default::default()
        };
        let (c, r) = (
            net(Stage::Classifier, Architecture::Gatv2, 1, 1),
            net(Stage::Regressor, Architecture::Gatv2, 1, 2),
        );
        let hurdle = Hurdle {
            classifier: &c,
            regressor: &r,
            threshold: 0.5,
        };
        let fc = live_rollout(&g, &hurdle, "gatv2", &cfg, false, None).unwrap();
        let plan = &plans_for(&g, &cfg)[3];
        let state = RolloutState::new(&g, plan.origin);
        let view = extract_consistent_subgraph(&g, &plan.steps[0], &state, 2).unwrap();
        let direct =
            crate::model::hurdle_predict(&c, &r, &GraphInput::from_view(&view).unwrap(), 0.5)
                .unwrap();
        for (&a, &d) in plan.steps[0].iter().zip(direct.column(0)) {
            let p = fc.predictions.iter().find(|p| p.node == a).unwrap();
            assert_eq!(p.pred, d);
        }
    }

    #[test]
    fn sample_test_days_contract() {
        let days: Vec<NaiveDate> = (0..60)
            .map(|d| NaiveDate::from_ymd_opt(2022, 1, 3).unwrap() + chrono::Duration::days(d))
            .collect();
        let (train, held) = days.split_at(30);
        let a = sample_test_days(held, train, 30, 1).unwrap();
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, held);
        assert_eq!(a, sample_test_days(held, train, 30, 1).unwrap());
        assert_ne!(
            sample_test_days(&days, &[], 30, 1).unwrap(),
            sample_test_days(&days, &[], 30, 2).unwrap()
        );
        assert!(sample_test_days(held, train, 31, 1).is_err());
        assert!(sample_test_days(&days, train, 30, 1)
            .unwrap()
            .iter()
            .all(|d| !train.contains(d)));
    }

    #[test]
    fn logs_roundtrip() {
        let g = graph();
        let cfg = ForecastConfig {
            k: 3,
            depth: 2,
            ..Default::default()
        };
        let rows = prediction_rows(&g, &persistence_baseline(&g, &cfg));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        write_prediction_log(&p, &rows).unwrap();
        assert_eq!(read_prediction_log(&p).unwrap(), rows);
        let edges = edge_refs(&g);
        let e = dir.path().join("e.csv");
        write_edge_log(&e, &edges).unwrap();
        assert_eq!(read_edge_log(&e).unwrap(), edges);
        let meta = event_metadata(&g);
        let m = dir.path().join("m.csv");
        write_event_metadata(&m, &meta).unwrap();
        assert_eq!(read_event_metadata(&m).unwrap(), meta);
        let att = vec![AttentionRecord {
            edge_src: 1,
            edge_dst: 2,
            edge_type: None,
            layer: 0,
            head: 3,
            score: 0.25,
        }];
        let a = dir.path().join("a.csv");
        write_attention_log(&a, &att).unwrap();
        assert_eq!(read_attention_log(&a).unwrap(), att);
    }
}
