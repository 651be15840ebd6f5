//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Pass criterion numbers as
//! arguments to run a subset. A failed criterion makes the process exit
//! nonzero only when `ACCEPTANCE_STRICT` is set. `ACCEPTANCE_REUSE` reuses
//! the workspace of a previous full-size run (its training time is then
//! unknown and the runtime clause fails).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use delayprop::config::RunConfig;
use delayprop::stages::{self, Context};
use delayprop_core::eval::{
    attention_analysis, attention_sums, classification_metrics, epe, epe_classification,
    per_horizon_metrics, propagation_overlap, regression_metrics, row_metrics, EdgeScore,
};
use delayprop_core::features::{FeatureConfig, Preprocessor, CATEGORICAL_COUNT};
use delayprop_core::forecast::{
    gcn_oneshot_forecast, persistence_plan, plans_for, prediction_rows, read_attention_log,
    read_edge_log, read_event_metadata, read_prediction_log, rollout_plan, AttentionRecord,
    EdgeRef, ForecastConfig, Hurdle, PredictionRow, StepPredictor,
};
use delayprop_core::graph::{
    plan_rollouts, EdgeType, EventGraph, EventKind, RolloutPlan, RolloutState, SubgraphView,
};
use delayprop_core::ingest::{
    clean, generate_synthetic, group_by_day, CleanStop, CleanTrip, CleaningConfig, GroundTruth,
    RawStopRecord, SyntheticConfig,
};
use delayprop_core::model::gradcheck::{check_gradients, random_input};
use delayprop_core::model::{
    bce_with_logits, hurdle_predict, load_checkpoint, masked_mse, sigmoid, Architecture,
    GatBodyConfig, HeadCombination, ModelSpec, Network, Stage,
};
use delayprop_core::train::fit_preprocessor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn io<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

const SIZES: [usize; CATEGORICAL_COUNT] = [7, 13, 3, 6, 3];

fn spec(stage: Stage, combine: HeadCombination, layers: usize) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::Gatv2,
        stage,
        body: GatBodyConfig {
            layers,
            hidden_channels: 4,
            attention_heads: 3,
            embedding_dims: [2; CATEGORICAL_COUNT],
            head_combination: combine,
            ..Default::default()
        },
        outputs: 1,
        categorical_sizes: SIZES,
    }
}

fn jitter(net: &mut Network, rng: &mut ChaCha8Rng, scale: f64) {
    for t in net.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

fn column(v: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((v.len(), 1), v).expect("column shape")
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn gradients() -> Check {
    let mut worst: f64 = 0.0;
    let mut tensors = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = rng.gen_range(8..=30);
        for combine in [HeadCombination::Average, HeadCombination::ConcatProject] {
            for stage in [Stage::Classifier, Stage::Regressor] {
                let mut net = io(Network::new(spec(stage, combine, 3), rng.gen()))?;
                jitter(&mut net, &mut rng, 0.3);
                let inp = random_input(&mut rng, nodes, SIZES);
                let checks = match stage {
                    Stage::Classifier => {
                        let labels: Vec<bool> = (0..nodes).map(|_| rng.gen_bool(0.4)).collect();
                        let loss = move |out: &Array2<f64>| {
                            let (l, g) = bce_with_logits(&out.column(0).to_vec(), &labels, 1.0);
                            (l.loss, column(g))
                        };
                        check_gradients(&net, &inp, &loss, 1e-5, 1e-6)
                    }
                    Stage::Regressor => {
                        let delays: Vec<f64> = (0..nodes)
                            .map(|_| {
                                if rng.gen_bool(0.3) {
                                    0.0
                                } else {
                                    rng.gen_range(0.5..40.0)
                                }
                            })
                            .collect();
                        let loss = move |out: &Array2<f64>| {
                            let (l, g) = masked_mse(&out.column(0).to_vec(), &delays);
                            (l.loss, column(g))
                        };
                        check_gradients(&net, &inp, &loss, 1e-5, 1e-6)
                    }
                };
                for c in checks {
                    tensors += 1;
                    worst = worst.max(c.group_rel_error);
                    ensure(c.group_rel_error < 1e-4, || {
                        format!(
                            "seed {seed} {stage:?} {combine:?} {}: relative error {:.3e}",
                            c.name, c.group_rel_error
                        )
                    })?;
                }
            }
        }
    }
    Ok(format!(
        "{tensors} parameter groups over 10 seeds, worst relative error {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Hurdle gating

fn hurdle_gating() -> Check {
    let bound = 5f64.exp_m1();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut inferences, mut gated, mut max_pos) = (0usize, 0usize, 0f64);
    while inferences < 100_000 {
        let layers = rng.gen_range(1..=3);
        let mut cls = io(Network::new(
            spec(Stage::Classifier, HeadCombination::Average, layers),
            rng.gen(),
        ))?;
        let mut reg = io(Network::new(
            spec(Stage::Regressor, HeadCombination::Average, layers),
            rng.gen(),
        ))?;
        jitter(&mut cls, &mut rng, 0.5);
        let scale = rng.gen_range(0.1..6.0);
        reg.head.w.mapv_inplace(|w| w * scale);
        let nodes = rng.gen_range(5..40);
        let inp = random_input(&mut rng, nodes, SIZES);
        let threshold = rng.gen_range(0.2..0.8);
        let logits = io(cls.forward(&inp))?.output;
        let out = io(hurdle_predict(&cls, &reg, &inp, threshold))?;
        for (&l, &y) in logits.iter().zip(&out) {
            inferences += 1;
            if sigmoid(l) < threshold {
                gated += 1;
                ensure(y == 0.0, || format!("gated node predicted {y}"))?;
            } else {
                ensure(y < bound, || format!("prediction {y} not below {bound}"))?;
                max_pos = max_pos.max(y);
            }
        }
    }
    Ok(format!(
        "{inferences} inferences, {gated} gated to 0, largest positive {max_pos:.6} < {bound:.6}"
    ))
}

// ---------------------------------------------------------------------------
// 3. Sequential consistency

fn synthetic_days(cfg: &SyntheticConfig) -> (Vec<EventGraph>, [usize; CATEGORICAL_COUNT]) {
    let ds = generate_synthetic(cfg).expect("synthetic data");
    let (trips, _) = clean(ds.records, &CleaningConfig::default());
    let mut graphs: Vec<EventGraph> = group_by_day(trips)
        .into_values()
        .map(|t| EventGraph::build(&t, &FeatureConfig::default()).expect("graph"))
        .collect();
    let pre = fit_preprocessor(&graphs).expect("preprocessor");
    for g in &mut graphs {
        g.encode(&pre);
    }
    (graphs, pre.categorical_sizes())
}

struct Recorder<'a> {
    inner: &'a dyn StepPredictor,
    views: Mutex<Vec<SubgraphView>>,
}

impl StepPredictor for Recorder<'_> {
    fn predict(
        &self,
        graph: &EventGraph,
        view: &SubgraphView,
        capture: bool,
    ) -> delayprop_core::Result<(Vec<f64>, Vec<AttentionRecord>)> {
        self.views.lock().expect("lock").push(view.clone());
        self.inner.predict(graph, view, capture)
    }
}

fn plan_at(graph: &EventGraph, cutoff: i64, k: usize, w: i64) -> RolloutPlan {
    let mut steps = vec![Vec::new(); k];
    for n in &graph.nodes {
        let off = n.scheduled - cutoff;
        if (0..k as i64 * w).contains(&off) && !n.actual.is_some_and(|a| a < cutoff) {
            steps[(off / w) as usize].push(n.id);
        }
    }
    RolloutPlan {
        tile_start: cutoff,
        origin: cutoff,
        steps,
    }
}

type Trace = (Vec<SubgraphView>, Vec<u64>);

fn trace(graph: &EventGraph, plan: &RolloutPlan, p: &dyn StepPredictor) -> Result<Trace, String> {
    let rec = Recorder {
        inner: p,
        views: Mutex::new(Vec::new()),
    };
    let (preds, _) = io(rollout_plan(graph, plan, &rec, 3, false, None))?;
    Ok((
        rec.views.into_inner().expect("lock"),
        preds.iter().map(|p| p.pred.to_bits()).collect(),
    ))
}

fn no_leakage() -> Check {
    let (days, sizes) = synthetic_days(&SyntheticConfig {
        station_count: 12,
        trips_per_day: 24,
        day_count: 6,
        primary_delay_rate: 0.15,
        ..Default::default()
    });
    let mut full = spec(Stage::Classifier, HeadCombination::Average, 3);
    full.body.hidden_channels = 8;
    full.categorical_sizes = sizes;
    let cls = io(Network::new(full.clone(), 31))?;
    full.stage = Stage::Regressor;
    let reg = io(Network::new(full, 32))?;
    let hurdle = Hurdle {
        classifier: &cls,
        regressor: &reg,
        threshold: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut views, mut anchors, mut mutated_events) = (0, 0, 0);
    for pair in 0..100 {
        let graph = &days[rng.gen_range(0..days.len())];
        let lo = graph
            .nodes
            .iter()
            .map(|n| n.scheduled)
            .min()
            .expect("events");
        let hi = graph
            .nodes
            .iter()
            .map(|n| n.scheduled)
            .max()
            .expect("events");
        let cutoff = rng.gen_range(lo..=hi);
        let plan = plan_at(graph, cutoff, rng.gen_range(1..=10), 10);
        let before = trace(graph, &plan, &hurdle)?;
        let mut changed = graph.clone();
        for v in &graph.nodes {
            if !v.actual.is_some_and(|a| a < cutoff) {
                let actual = if rng.gen_bool(0.2) {
                    None
                } else {
                    Some(cutoff.max(v.scheduled) + rng.gen_range(0..300))
                };
                changed.set_actual(v.id, actual);
                mutated_events += 1;
            }
        }
        let after = trace(&changed, &plan, &hurdle)?;
        ensure(before.0 == after.0, || {
            format!("pair {pair}: a subgraph view changed")
        })?;
        ensure(before.1 == after.1, || {
            format!("pair {pair}: a prediction changed")
        })?;
        views += before.0.len();
        anchors += before.1.len();
    }
    Ok(format!("100 (day, cutoff) pairs, {views} step views and {anchors} predictions identical after {mutated_events} future mutations"))
}

// ---------------------------------------------------------------------------
// 4. Loss mask

fn loss_mask() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perturbed = 0;
    for _ in 0..50 {
        let mut net = io(Network::new(
            spec(Stage::Regressor, HeadCombination::Average, 2),
            rng.gen(),
        ))?;
        jitter(&mut net, &mut rng, 0.3);
        let n = rng.gen_range(5..30);
        let inp = random_input(&mut rng, n, SIZES);
        let delays: Vec<f64> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.5) {
                    0.0
                } else {
                    rng.gen_range(1.0..60.0)
                }
            })
            .collect();
        let fwd = io(net.forward(&inp))?;
        let pre = fwd.output.column(0).to_vec();
        let mut moved = pre.clone();
        for (p, &d) in moved.iter_mut().zip(&delays) {
            if d == 0.0 {
                *p += rng.gen_range(-10.0..10.0);
                perturbed += 1;
            }
        }
        let (la, ga) = masked_mse(&pre, &delays);
        let (lb, gb) = masked_mse(&moved, &delays);
        ensure(la.loss.to_bits() == lb.loss.to_bits(), || {
            "loss changed".into()
        })?;
        ensure(
            ga.iter().zip(&gb).all(|(a, b)| a.to_bits() == b.to_bits()),
            || "output gradient changed".into(),
        )?;
        let (mut pa, mut pb) = (net.zeros_like(), net.zeros_like());
        net.backward(&inp, &fwd, &column(ga), &mut pa);
        net.backward(&inp, &fwd, &column(gb), &mut pb);
        ensure(pa == pb, || "a parameter gradient changed".into())?;
    }
    Ok(format!(
        "{perturbed} on-time outputs perturbed, loss and gradients bit-identical"
    ))
}

// ---------------------------------------------------------------------------
// 5. Metric oracles

fn oracle_scores(pairs: &[(bool, bool)]) -> [f64; 4] {
    let count = |p: bool, t: bool| pairs.iter().filter(|&&x| x == (p, t)).count() as f64;
    let (tp, fp, fneg, tn) = (
        count(true, true),
        count(true, false),
        count(false, true),
        count(false, false),
    );
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (p, r) = (div(tp, tp + fp), div(tp, tp + fneg));
    [
        div(tp + tn, tp + fp + fneg + tn),
        p,
        r,
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        },
    ]
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let day = NaiveDate::from_ymd_opt(2023, 5, 1).expect("date");
    for case in 0..1000 {
        let n = rng.gen_range(1..60);
        let draw = |rng: &mut ChaCha8Rng| {
            if rng.gen_bool(0.4) {
                0.0
            } else {
                rng.gen_range(0.0..30.0)
            }
        };
        let truth: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let pred: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();

        let mut abs = 0.0;
        let mut sq = 0.0;
        for i in 0..n {
            abs += (pred[i] - truth[i]).abs();
            sq += (pred[i] - truth[i]).powi(2);
        }
        let (mae, rmse) = io(regression_metrics(&pred, &truth))?;
        ensure(
            close(mae, abs / n as f64) && close(rmse, (sq / n as f64).sqrt()),
            || format!("case {case}: MAE/RMSE"),
        )?;
        let c = io(classification_metrics(&pred, &truth, 0.0))?;
        let pairs: Vec<(bool, bool)> = (0..n).map(|i| (pred[i] > 0.0, truth[i] > 0.0)).collect();
        let o = oracle_scores(&pairs);
        ensure(
            [c.accuracy, c.precision, c.recall, c.f1]
                .iter()
                .zip(o)
                .all(|(&a, b)| close(a, b)),
            || format!("case {case}: classification scores"),
        )?;

        // Edges over the same events; EPE and change classification per type.
        let key = |i: usize| (day, format!("t{}", i % 7), i as u32, EventKind::Arrival);
        let values: HashMap<_, _> = (0..n).map(|i| (key(i), (truth[i], pred[i]))).collect();
        let edges: Vec<EdgeRef> = (0..rng.gen_range(1..80))
            .map(|_| EdgeRef {
                src: key(rng.gen_range(0..n + 3)),
                dst: key(rng.gen_range(0..n + 3)),
                edge_type: EdgeType::ALL[rng.gen_range(0..3)],
            })
            .collect();
        let tol = rng.gen_range(0.0..3.0);
        let scores = epe_classification(&edges, &values, tol);
        for ty in EdgeType::ALL {
            let mut pairs = Vec::new();
            for e in edges.iter().filter(|e| e.edge_type == ty) {
                let (Some(&(ti, pi)), Some(&(tj, pj))) = (values.get(&e.src), values.get(&e.dst))
                else {
                    continue;
                };
                let e_brute = ((tj - ti) - (pj - pi)).abs();
                ensure(close(epe(ti, tj, pi, pj), e_brute), || {
                    format!("case {case}: EPE")
                })?;
                pairs.push(((pj - pi).abs() > tol, (tj - ti).abs() > tol));
            }
            let o = oracle_scores(&pairs);
            let s = &scores[&ty];
            ensure(
                [s.accuracy, s.precision, s.recall, s.f1]
                    .iter()
                    .zip(o)
                    .all(|(&a, b)| close(a, b)),
                || format!("case {case}: epe_classification {ty}"),
            )?;
        }
    }

    // Uniform bias on exactly representable values leaves EPE unchanged.
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..1000 {
        let v: Vec<f64> = (0..5)
            .map(|_| rng.gen_range(-4096i32..4096) as f64 / 8.0)
            .collect();
        let (ti, tj, pi, pj, b) = (v[0], v[1], v[2], v[3], v[4]);
        ensure(epe(ti, tj, pi + b, pj + b) == epe(ti, tj, pi, pj), || {
            format!("bias {b} changed EPE")
        })?;
    }
    Ok("1000 random instances within 1e-10; bias invariance exact on 1000 dyadic vectors".into())
}

// ---------------------------------------------------------------------------
// Full-size pipeline shared by criteria 6 to 11

struct Full {
    ws: PathBuf,
    cfg: RunConfig,
    seconds: f64,
}

fn full_run() -> Result<&'static Full, String> {
    static RUN: OnceLock<Result<Full, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg =
            io(RunConfig::load(&root().join("configs/default.toml"))
                .and_then(|c| c.finalize(None)))?;
        let ws = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-full");
        let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
        let ctx = Context {
            cfg: cfg.clone(),
            workspace: ws.clone(),
            jobs,
        };
        if std::env::var_os("ACCEPTANCE_REUSE").is_some()
            && ws.join("explain/manifest.json").exists()
        {
            return Ok(Full {
                ws,
                cfg,
                seconds: f64::NAN,
            });
        }
        io(stages::synth(&ctx))?;
        io(stages::ingest(&ctx, Some(&ws.join("data/records.csv"))))?;
        io(stages::graph(&ctx))?;
        let start = Instant::now();
        io(stages::train_models(&ctx))?;
        let seconds = start.elapsed().as_secs_f64();
        io(stages::forecast(&ctx))?;
        io(stages::evaluate(&ctx))?;
        io(stages::explain(&ctx))?;
        Ok(Full { ws, cfg, seconds })
    })
    .as_ref()
    .map_err(|e| format!("pipeline failed: {e}"))
}

fn json(path: &Path) -> Result<Value, String> {
    io(serde_json::from_str(&io(std::fs::read_to_string(path))?))
}

fn rows_of<'a>(rows: &'a [PredictionRow], model: &str) -> Vec<&'a PredictionRow> {
    rows.iter().filter(|r| r.model_name == model).collect()
}

// ---------------------------------------------------------------------------
// 6. Baselines

fn day() -> NaiveDate {
    NaiveDate::from_ymd_opt(2023, 3, 14).expect("date")
}

fn at(minute: i64) -> NaiveDateTime {
    day().and_hms_opt(0, 0, 0).expect("midnight") + Duration::minutes(minute)
}

/// Trips every 7 minutes over 20 stations, each with its own constant delay.
fn constant_delay_day() -> EventGraph {
    let trips = (0..24)
        .map(|t| {
            let start = 6 * 60 + 7 * t as i64;
            let delay = (t % 5) as i64 * 2;
            let id = format!("c{t}");
            let stops = (0..20u32)
                .map(|i| {
                    let arr = (i > 0).then(|| start + 9 * i as i64);
                    let dep = (i < 19).then(|| start + 9 * i as i64 + if i == 0 { 0 } else { 1 });
                    CleanStop {
                        record: RawStopRecord {
                            service_day: day(),
                            train_number: id.clone(),
                            trip_id: id.clone(),
                            station_code: format!("S{i}"),
                            stop_index: i,
                            train_type: "Sprinter".into(),
                            scheduled_arrival: arr.map(at),
                            actual_arrival: arr.map(|m| at(m + delay)),
                            scheduled_departure: dep.map(at),
                            actual_departure: dep.map(|m| at(m + delay)),
                            platform_scheduled: Some("1".into()),
                            platform_actual: Some("1".into()),
                            cancelled_arrival: false,
                            cancelled_departure: false,
                        },
                        prev_stop_cancelled: false,
                        num_prev_cancelled: 0,
                    }
                })
                .collect();
            CleanTrip {
                service_day: day(),
                trip_id: id,
                train_type: "Sprinter".into(),
                stops,
            }
        })
        .collect::<Vec<_>>();
    EventGraph::build(&trips, &FeatureConfig::default()).expect("graph")
}

/// Keep the anchors whose trip has a realized departure two stops before
/// its first open stop.
fn with_history(graph: &EventGraph, plan: &RolloutPlan) -> RolloutPlan {
    let state = RolloutState::new(graph, plan.origin);
    let mut first_open: HashMap<usize, u32> = HashMap::new();
    for n in graph.nodes.iter().filter(|n| !state.is_realized(n.id)) {
        let e = first_open.entry(n.trip).or_insert(n.stop_index);
        *e = (*e).min(n.stop_index);
    }
    let known = |trip: usize| {
        first_open
            .get(&trip)
            .and_then(|i| i.checked_sub(2))
            .is_some_and(|i| {
                graph.nodes.iter().any(|n| {
                    n.trip == trip
                        && n.stop_index == i
                        && n.kind == EventKind::Departure
                        && state.is_realized(n.id)
                })
            })
    };
    let steps = plan
        .steps
        .iter()
        .map(|a| {
            a.iter()
                .copied()
                .filter(|&v| known(graph.nodes[v].trip))
                .collect()
        })
        .collect();
    RolloutPlan {
        steps,
        ..plan.clone()
    }
}

fn baselines() -> Check {
    let full = full_run()?;
    let rows = io(read_prediction_log(
        &full.ws.join("forecast/predictions.csv"),
    ))?;
    let zero = rows_of(&rows, "zero");
    let mean_truth = zero.iter().map(|r| r.true_delay).sum::<f64>() / zero.len() as f64;
    let zero_mae = io(row_metrics(zero.iter().copied()))?.mae;
    ensure((zero_mae - mean_truth).abs() <= 1e-9, || {
        format!("zero MAE {zero_mae} vs mean delay {mean_truth}")
    })?;

    let k = 10;
    let graph = constant_delay_day();
    let mut per_step = vec![(0usize, 0f64); k];
    let mut skipped = 0;
    for plan in plan_rollouts(&graph, k, 10) {
        let kept = with_history(&graph, &plan);
        skipped += plan.anchors().count() - kept.anchors().count();
        for p in persistence_plan(&graph, &kept) {
            per_step[p.step].0 += 1;
            per_step[p.step].1 += (p.pred - p.truth).abs();
        }
    }
    ensure(per_step.iter().all(|&(n, _)| n > 0), || {
        format!("a horizon step has no anchors: {per_step:?}")
    })?;
    ensure(per_step.iter().all(|&(_, e)| e == 0.0), || {
        format!("persistence errors per step: {per_step:?}")
    })?;

    // Constant per trip within each rollout on the synthetic test days.
    let (days, _) = synthetic_days(&SyntheticConfig {
        station_count: 12,
        trips_per_day: 24,
        day_count: 3,
        ..Default::default()
    });
    let cfg = ForecastConfig {
        k,
        ..Default::default()
    };
    let mut groups = 0;
    for g in &days {
        for plan in plans_for(g, &cfg) {
            let mut by_trip: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for p in persistence_plan(g, &plan) {
                by_trip
                    .entry(g.nodes[p.node].trip)
                    .or_default()
                    .push(p.pred);
            }
            for preds in by_trip.values() {
                groups += 1;
                ensure(preds.iter().all(|&x| x == preds[0]), || {
                    format!("persistence varies within a rollout: {preds:?}")
                })?;
            }
        }
    }
    Ok(format!(
        "zero MAE {zero_mae:.6} = mean delay; persistence per-step MAE 0 at all {k} steps ({skipped} anchors without two realized stops excluded); {groups} trip forecasts constant"
    ))
}

// ---------------------------------------------------------------------------
// 7. Learnability

fn learnability() -> Check {
    let full = full_run()?;
    let fdir = full.ws.join("forecast");
    let rows = io(read_prediction_log(&fdir.join("predictions.csv")))?;
    let early: Vec<PredictionRow> = rows.into_iter().filter(|r| r.step_k <= 3).collect();
    let gat = io(row_metrics(rows_of(&early, "gatv2")))?;
    let zero = io(row_metrics(rows_of(&early, "zero")))?;

    let training = json(&full.ws.join("models/training.json"))?;
    let classifier = training
        .as_array()
        .and_then(|a| a.iter().find(|m| m["name"] == "gatv2_classifier"))
        .ok_or("no gatv2_classifier in training.json")?;
    let val: Vec<f64> = classifier["validation"]
        .as_array()
        .ok_or("no validation losses")?
        .iter()
        .filter_map(Value::as_f64)
        .collect();
    let (first, last) = (
        val.get(1).copied().unwrap_or(f64::NAN),
        val.last().copied().unwrap_or(f64::NAN),
    );

    let truth: GroundTruth = io(serde_json::from_value(json(
        &full.ws.join("data/ground_truth.json"),
    )?))?;
    let meta = io(read_event_metadata(&fdir.join("events.csv")))?;
    let edges = io(read_edge_log(&fdir.join("edges.csv")))?;
    let gat_rows: Vec<PredictionRow> = rows_of(&early, "gatv2").into_iter().cloned().collect();
    let overlap = propagation_overlap(
        &edges,
        &gat_rows,
        &meta,
        &truth.propagation_events,
        full.cfg.eval.change_tolerance,
    );
    let share = overlap.overlap.unwrap_or(0.0);

    let detail = format!(
        "k<=3: GATv2 F1 {:.3} vs zero {:.3}, MAE {:.3} vs zero {:.3}; headway overlap {:.1}% ({}/{} logged events); validation BCE epoch 0 {first:.4} -> last {last:.4}; training {:.0}s",
        gat.f1,
        zero.f1,
        gat.mae,
        zero.mae,
        100.0 * share,
        overlap.predicted_positive,
        overlap.ground_truth_edges,
        full.seconds
    );
    ensure(last < first, || {
        format!("validation BCE did not fall: {detail}")
    })?;
    ensure(gat.f1 > zero.f1, || {
        format!("F1 not above zero baseline: {detail}")
    })?;
    ensure(gat.mae < zero.mae, || {
        format!("MAE not below zero baseline: {detail}")
    })?;
    ensure(share >= 0.6, || format!("overlap below 60%: {detail}"))?;
    ensure(full.seconds < 900.0, || {
        format!("over 15 minutes: {detail}")
    })?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Per-horizon report

fn horizon_report() -> Check {
    let full = full_run()?;
    let report = json(&full.ws.join("reports/metrics.json"))?;
    let k = full.cfg.train.rollout.k;
    ensure(report["k"].as_u64() == Some(k as u64), || {
        "report k differs from the config".into()
    })?;
    let models = report["models"].as_object().ok_or("no models")?;
    let mut worst: f64 = 0.0;
    for (name, m) in models {
        let h = &m["per_horizon"];
        let counts: Vec<f64> = h["count"]
            .as_array()
            .ok_or("no counts")?
            .iter()
            .filter_map(Value::as_f64)
            .collect();
        let maes: Vec<Option<f64>> = h["mae"]
            .as_array()
            .ok_or("no maes")?
            .iter()
            .map(Value::as_f64)
            .collect();
        ensure(counts.len() == k && maes.len() == k, || {
            format!("{name}: arrays are not {k} long")
        })?;
        let total: f64 = counts.iter().sum();
        let weighted: f64 = counts
            .iter()
            .zip(&maes)
            .map(|(c, m)| c * m.unwrap_or(0.0))
            .sum();
        let overall = m["overall"]["mae"].as_f64().ok_or("no overall MAE")?;
        let gap = (weighted / total - overall).abs();
        worst = worst.max(gap);
        ensure(gap <= 1e-9, || {
            format!("{name}: recombined MAE off by {gap:e}")
        })?;
    }
    Ok(format!(
        "{} models with {k}-step arrays; recombined MAE within {worst:.1e}",
        models.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. Attention

fn attention() -> Check {
    let full = full_run()?;
    let dir = full.ws.join("forecast/attention");
    let (mut distributions, mut worst) = (0usize, 0f64);
    for entry in io(std::fs::read_dir(&dir))? {
        let records = io(read_attention_log(&io(entry)?.path()))?;
        for s in attention_sums(&records) {
            distributions += 1;
            worst = worst.max((s - 1.0).abs());
        }
    }
    ensure(distributions > 0, || "no attention captured".into())?;
    ensure(worst <= 1e-6, || {
        format!("an attention distribution sums to 1 ± {worst:e}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = NaiveDate::from_ymd_opt(2023, 1, 9).expect("date");
    let mut scores: Vec<EdgeScore> = (0..190)
        .map(|i| EdgeScore {
            service_day: d,
            src: i,
            dst: i + 1,
            edge_type: EdgeType::ALL[rng.gen_range(0..3)],
            score: rng.gen_range(0.0..0.5),
        })
        .collect();
    scores.extend((0..10).map(|i| EdgeScore {
        service_day: d,
        src: 500 + i,
        dst: 501 + i,
        edge_type: EdgeType::Dwell,
        score: 0.9 + i as f64 * 0.01,
    }));
    let analysis = io(attention_analysis(&scores, 95.0, &[]))?;
    let dwell = analysis.types[EdgeType::Dwell.as_str()].high_proportion;
    ensure(analysis.high_edges == 10 && dwell == 1.0, || {
        format!(
            "planted top 5%: {} high edges, Dwell proportion {dwell}",
            analysis.high_edges
        )
    })?;
    Ok(format!("{distributions} captured distributions sum to 1 within {worst:.1e}; planted Dwell proportion {dwell}"))
}

// ---------------------------------------------------------------------------
// 10. Permutation importance

fn importance() -> Check {
    let full = full_run()?;
    let report = json(&full.ws.join("explain/feature_importance.json"))?;
    let rows = report["rows"].as_array().ok_or("no importance rows")?;
    let value = |name: &str| {
        rows.iter()
            .find(|r| r["feature"] == name)
            .and_then(|r| r["importance"].as_f64())
    };
    let lag2 = value("lag2_delay").ok_or("lag2_delay not scored")?;
    let top = rows
        .iter()
        .filter_map(|r| Some((r["feature"].as_str()?, r["importance"].as_f64()?)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("empty report")?;
    ensure(top.0 == "lag2_delay", || {
        format!(
            "largest importance is {} ({:.4}), lag2_delay {lag2:.4}",
            top.0, top.1
        )
    })?;
    let mut constants = Vec::new();
    for name in ["is_weekend", "is_holiday", "day_of_week", "month"] {
        let v = value(name).ok_or_else(|| format!("{name} not scored"))?;
        ensure(v.abs() <= 0.01, || format!("{name} importance {v}"))?;
        constants.push(format!("{name} {v:+.4}"));
    }
    Ok(format!(
        "lag2_delay top at {lag2:+.4}; day-constant features {}",
        constants.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 11. One-shot GCN

fn gcn_contract() -> Check {
    let full = full_run()?;
    let cls = io(load_checkpoint(&full.ws.join("models/gcn_classifier.json")))?;
    let reg = io(load_checkpoint(&full.ws.join("models/gcn_regressor.json")))?;
    let pre: Preprocessor = io(serde_json::from_value(json(
        &full.ws.join("graphs/preprocessor.json"),
    )?))?;
    let days: Vec<NaiveDate> = io(serde_json::from_value(json(
        &full.ws.join("forecast/test_days.json"),
    )?))?;
    let cfg = full.cfg.forecast_config();
    let (mut rows, mut batches) = (Vec::new(), 0);
    for d in days.iter().take(3) {
        let mut g = io(EventGraph::read_dir(
            &full.ws.join("graphs/days").join(d.to_string()),
        ))?;
        g.encode(&pre);
        let plans = plans_for(&g, &cfg)
            .iter()
            .filter(|p| p.anchors().next().is_some())
            .count();
        let (c0, r0) = (cls.forward_calls(), reg.forward_calls());
        let fc = io(gcn_oneshot_forecast(&g, &cls, &reg, "gcn", &cfg))?;
        let (dc, dr) = (cls.forward_calls() - c0, reg.forward_calls() - r0);
        ensure(dc == plans && dr == plans, || {
            format!("{d}: {plans} batches but {dc}/{dr} forward calls")
        })?;
        ensure(fc.predictions.iter().all(|p| p.step < cfg.k), || {
            "step outside the horizon".into()
        })?;
        batches += plans;
        rows.extend(prediction_rows(&g, &fc));
    }
    let report = io(per_horizon_metrics(&rows, cfg.k))?;
    let h = &report.models["gcn"].per_horizon;
    ensure(
        h.count.len() == cfg.k && h.count.iter().all(|&c| c > 0),
        || format!("GCN horizon counts {:?}", h.count),
    )?;
    let logged = json(&full.ws.join("reports/metrics.json"))?;
    ensure(
        logged["models"]["gcn"]["per_horizon"]["mae"]
            .as_array()
            .map(Vec::len)
            == Some(cfg.k),
        || "pipeline report lacks GCN horizon arrays".into(),
    )?;
    Ok(format!(
        "{batches} batches, one forward per network each; {}-step report accepted",
        cfg.k
    ))
}

// ---------------------------------------------------------------------------
// 12. Determinism

fn determinism() -> Check {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-determinism");
    let cfg = root().join("configs/smoke.toml");
    let mut trees = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "2")] {
        let ws = base.join(run);
        let out = io(Command::new(env!("CARGO_BIN_EXE_delayprop"))
            .args(["pipeline", "--seed", "7", "--jobs", jobs, "--config"])
            .arg(&cfg)
            .arg("--workspace")
            .arg(&ws)
            .env_remove("RUST_LOG")
            .output())?;
        ensure(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })?;
        let mut files = BTreeMap::new();
        for stage in ["forecast", "reports", "explain"] {
            collect(&ws, &ws.join(stage), &mut files)?;
        }
        trees.push(files);
    }
    ensure(trees[0].keys().eq(trees[1].keys()), || {
        "file sets differ".into()
    })?;
    for (name, bytes) in &trees[0] {
        ensure(&trees[1][name] == bytes, || format!("{name} differs"))?;
    }
    Ok(format!(
        "{} prediction, report and explain files byte-identical across two runs",
        trees[0].len()
    ))
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    for entry in io(std::fs::read_dir(dir))? {
        let path = io(entry)?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .map_err(|e| e.to_string())?
                .display()
                .to_string();
            out.insert(rel, io(std::fs::read(&path))?);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradients),
        ("hurdle gating and bound", hurdle_gating),
        ("sequential consistency", no_leakage),
        ("loss mask", loss_mask),
        ("metric oracles", metric_oracles),
        ("baseline identities", baselines),
        ("learnability", learnability),
        ("per-horizon report", horizon_report),
        ("attention well-formedness", attention),
        ("permutation importance", importance),
        ("one-shot GCN contract", gcn_contract),
        ("end-to-end determinism", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name} ({secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {n:>2} {name} ({secs:.1}s): {reason}");
            }
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
