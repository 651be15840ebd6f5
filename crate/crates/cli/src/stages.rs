//! One function per subcommand. Each stage reads the previous stage's
//! directory under the workspace and replaces its own.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use delayprop_core::error::{Error, Result};
use delayprop_core::eval::{
    attention_analysis, edge_feature_table, epe_report, per_horizon_metrics,
    permutation_importance, plot, propagation_overlap, reduce_attention, subgroup_eval,
    PropagationOverlap,
};
use delayprop_core::exec::par_map;
use delayprop_core::features::Preprocessor;
use delayprop_core::forecast::{
    edge_refs, event_metadata, gcn_oneshot_forecast, live_rollout, persistence_baseline,
    prediction_rows, read_attention_log, read_edge_log, read_event_metadata, read_prediction_log,
    sample_test_days, write_attention_log, write_edge_log, write_event_metadata,
    write_prediction_log, AttentionRecord, EdgeRef, EventMeta, Hurdle, PredictionRow,
};
use delayprop_core::graph::EventGraph;
use delayprop_core::ingest::{
    assign_trip_ids, clean, filter_region, generate_synthetic, group_by_day, read_records,
    records_of, write_records, GroundTruth,
};
use delayprop_core::model::{load_checkpoint, save_checkpoint, Network};
use delayprop_core::train::{
    fit_preprocessor, split_days, train, GAT_CLASSIFIER, GAT_REGRESSOR, GCN_CLASSIFIER,
    GCN_REGRESSOR,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::write_manifest;

pub const GAT_MODEL: &str = "gatv2";
pub const GCN_MODEL: &str = "gcn";

/// Resolved settings for one invocation.
pub struct Context {
    pub cfg: RunConfig,
    pub workspace: PathBuf,
    pub jobs: usize,
}

impl Context {
    fn dir(&self, name: &str) -> PathBuf {
        self.workspace.join(name)
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn synth(ctx: &Context) -> Result<()> {
    let ds = generate_synthetic(&ctx.cfg.synthetic)?;
    let dir = ctx.dir("data");
    fresh_dir(&dir)?;
    let path = dir.join("records.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_records(BufWriter::new(file), &ds.records)?;
    write_json(&dir.join("ground_truth.json"), &ds.ground_truth)?;
    write_json(&dir.join("holidays.json"), &ds.holidays)?;
    log::info!(
        "synth: {} records, {} propagation events",
        ds.records.len(),
        ds.ground_truth.propagation_events.len()
    );
    write_manifest(&dir, "synth", &ctx.cfg)
}

pub fn ingest(ctx: &Context, input: Option<&Path>) -> Result<()> {
    let input = input
        .map(Path::to_path_buf)
        .or_else(|| ctx.cfg.paths.input.clone())
        .unwrap_or_else(|| ctx.dir("data").join("records.csv"));
    require(&input)?;
    let records = assign_trip_ids(read_records(&input)?, &ctx.cfg.trip_ids);
    let (mut trips, report) = clean(records, &ctx.cfg.cleaning);
    if let Some(region) = &ctx.cfg.region {
        trips = filter_region(trips, region)?;
    }
    let dir = ctx.dir("clean");
    fresh_dir(&dir)?;
    let path = dir.join("records.csv");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_records(BufWriter::new(file), &records_of(&trips))?;
    write_json(&dir.join("cleaning_report.json"), &report)?;
    log::info!(
        "ingest: kept {} trips, removed {} records",
        trips.len(),
        report.removed()
    );
    write_manifest(&dir, "ingest", &ctx.cfg)
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    train: Vec<NaiveDate>,
    validation: Vec<NaiveDate>,
    held_out: Vec<NaiveDate>,
}

pub fn graph(ctx: &Context) -> Result<()> {
    let input = ctx.dir("clean").join("records.csv");
    require(&input)?;
    let (trips, _) = clean(read_records(&input)?, &ctx.cfg.cleaning);
    let mut features = ctx.cfg.features.clone();
    let holidays = ctx.dir("data").join("holidays.json");
    if holidays.exists() {
        features
            .holidays
            .extend(read_json::<Vec<NaiveDate>>(&holidays)?);
    }
    let days: Vec<Vec<_>> = group_by_day(trips).into_values().collect();
    let graphs = par_map(ctx.jobs, &days, |t| EventGraph::build(t, &features))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let dates: Vec<NaiveDate> = graphs.iter().map(|g| g.service_day).collect();
    let split = split_days(&dates, &ctx.cfg.split)?;
    let train_graphs: Vec<EventGraph> = graphs
        .iter()
        .filter(|g| split.train.contains(&g.service_day))
        .cloned()
        .collect();
    let pre = fit_preprocessor(&train_graphs)?;

    let dir = ctx.dir("graphs");
    fresh_dir(&dir)?;
    for g in &graphs {
        g.write_dir(&dir.join("days").join(g.service_day.to_string()))?;
    }
    write_json(
        &dir.join("split.json"),
        &SplitFile {
            train: split.train,
            validation: split.validation,
            held_out: split.held_out,
        },
    )?;
    write_json(&dir.join("preprocessor.json"), &pre)?;
    log::info!("graph: {} day graphs", graphs.len());
    write_manifest(&dir, "graph", &ctx.cfg)
}

fn load_split(ctx: &Context) -> Result<SplitFile> {
    read_json(&ctx.dir("graphs").join("split.json"))
}

fn load_days(ctx: &Context, dates: &[NaiveDate]) -> Result<Vec<EventGraph>> {
    let pre: Preprocessor = read_json(&ctx.dir("graphs").join("preprocessor.json"))?;
    let dirs: Vec<PathBuf> = dates
        .iter()
        .map(|d| ctx.dir("graphs").join("days").join(d.to_string()))
        .collect();
    for d in &dirs {
        require(d)?;
    }
    par_map(ctx.jobs, &dirs, |d| {
        let mut g = EventGraph::read_dir(d)?;
        g.encode(&pre);
        Ok(g)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Serialize)]
struct ModelSummary<'a> {
    name: &'a str,
    best_epoch: Option<usize>,
    best_validation: f64,
    /// Mean validation loss before training, then after each epoch.
    validation: Vec<Option<f64>>,
    parameters: usize,
}

pub fn train_models(ctx: &Context) -> Result<()> {
    let split = load_split(ctx)?;
    let pre: Preprocessor = read_json(&ctx.dir("graphs").join("preprocessor.json"))?;
    let train_days = load_days(ctx, &split.train)?;
    let val_days = load_days(ctx, &split.validation)?;
    let out = train(
        &train_days,
        &val_days,
        pre.categorical_sizes(),
        &ctx.cfg.train,
        ctx.jobs,
    )?;

    let dir = ctx.dir("models");
    fresh_dir(&dir)?;
    let mut summary = Vec::new();
    for m in &out.models {
        save_checkpoint(&m.best, &dir.join(format!("{}.json", m.name)))?;
        summary.push(ModelSummary {
            name: m.name,
            best_epoch: m.best_epoch,
            best_validation: m.best_validation,
            validation: std::iter::once(None)
                .chain((0..ctx.cfg.train.rollout.epochs).map(Some))
                .map(|e| out.report.validation(m.name, e))
                .collect(),
            parameters: m.best.parameter_count(),
        });
    }
    out.report.write_csv(&dir.join("losses.csv"))?;
    write_json(&dir.join("training.json"), &summary)?;
    log::info!("train: {} models", out.models.len());
    write_manifest(&dir, "train", &ctx.cfg)
}

fn load_model(ctx: &Context, name: &str) -> Result<Network> {
    let path = ctx.dir("models").join(format!("{name}.json"));
    require(&path)?;
    load_checkpoint(&path)
}

struct DayOutput {
    rows: Vec<PredictionRow>,
    attention: Option<(NaiveDate, Vec<AttentionRecord>)>,
    meta: Vec<EventMeta>,
    edges: Vec<EdgeRef>,
}

pub fn forecast(ctx: &Context) -> Result<()> {
    let split = load_split(ctx)?;
    let days = sample_test_days(
        &split.held_out,
        &split.train,
        ctx.cfg.forecast.test_days,
        ctx.cfg.seed,
    )?;
    let graphs = load_days(ctx, &days)?;
    let (gc, gr) = (
        load_model(ctx, GAT_CLASSIFIER)?,
        load_model(ctx, GAT_REGRESSOR)?,
    );
    let gcn = if ctx.cfg.train.gcn {
        Some((
            load_model(ctx, GCN_CLASSIFIER)?,
            load_model(ctx, GCN_REGRESSOR)?,
        ))
    } else {
        None
    };
    let fcfg = ctx.cfg.forecast_config();
    let hurdle = Hurdle {
        classifier: &gc,
        regressor: &gr,
        threshold: fcfg.threshold,
    };
    let indexed: Vec<(usize, &EventGraph)> = graphs.iter().enumerate().collect();
    let outputs = par_map(ctx.jobs, &indexed, |&(i, g)| -> Result<DayOutput> {
        let capture = i < ctx.cfg.forecast.attention_days;
        let gat = live_rollout(g, &hurdle, GAT_MODEL, &fcfg, capture, None)?;
        let mut rows = prediction_rows(g, &gat);
        if let Some((c, r)) = &gcn {
            rows.extend(prediction_rows(
                g,
                &gcn_oneshot_forecast(g, c, r, GCN_MODEL, &fcfg)?,
            ));
        }
        rows.extend(prediction_rows(g, &persistence_baseline(g, &fcfg)));
        rows.extend(prediction_rows(
            g,
            &delayprop_core::forecast::zero_baseline(g, &fcfg),
        ));
        Ok(DayOutput {
            rows,
            attention: capture.then_some((g.service_day, gat.attention)),
            meta: event_metadata(g),
            edges: edge_refs(g),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let dir = ctx.dir("forecast");
    fresh_dir(&dir)?;
    let att_dir = dir.join("attention");
    std::fs::create_dir_all(&att_dir).map_err(|e| Error::io(&att_dir, e))?;
    let (mut rows, mut meta, mut edges) = (Vec::new(), Vec::new(), Vec::new());
    for o in outputs {
        rows.extend(o.rows);
        meta.extend(o.meta);
        edges.extend(o.edges);
        if let Some((day, records)) = o.attention {
            write_attention_log(&att_dir.join(format!("{day}.csv")), &records)?;
        }
    }
    write_prediction_log(&dir.join("predictions.csv"), &rows)?;
    write_event_metadata(&dir.join("events.csv"), &meta)?;
    write_edge_log(&dir.join("edges.csv"), &edges)?;
    write_json(&dir.join("test_days.json"), &days)?;
    log::info!(
        "forecast: {} prediction rows over {} days",
        rows.len(),
        days.len()
    );
    write_manifest(&dir, "forecast", &ctx.cfg)
}

pub fn evaluate(ctx: &Context) -> Result<()> {
    let fdir = ctx.dir("forecast");
    let rows = read_prediction_log(&fdir.join("predictions.csv"))?;
    let meta = read_event_metadata(&fdir.join("events.csv"))?;
    let edges = read_edge_log(&fdir.join("edges.csv"))?;
    let metrics = per_horizon_metrics(&rows, ctx.cfg.train.rollout.k)?;
    let tol = ctx.cfg.eval.change_tolerance;
    let epe = epe_report(&edges, &rows, tol);
    let subgroups = subgroup_eval(&rows, &meta, &ctx.cfg.eval.subgroups)?;
    let truth_path = ctx.dir("data").join("ground_truth.json");
    let overlap: Option<BTreeMap<String, PropagationOverlap>> = if truth_path.exists() {
        let truth: GroundTruth = read_json(&truth_path)?;
        let by_model = delayprop_core::forecast::by_model(&rows);
        Some(
            by_model
                .into_iter()
                .map(|(m, rs)| {
                    let rs: Vec<PredictionRow> = rs.into_iter().cloned().collect();
                    (
                        m.to_string(),
                        propagation_overlap(&edges, &rs, &meta, &truth.propagation_events, tol),
                    )
                })
                .collect(),
        )
    } else {
        None
    };

    let dir = ctx.dir("reports");
    fresh_dir(&dir)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    write_text(&dir.join("metrics.csv"), &metrics.to_csv())?;
    write_json(&dir.join("epe.json"), &epe)?;
    write_text(&dir.join("epe.csv"), &epe.to_csv())?;
    write_json(&dir.join("subgroups.json"), &subgroups)?;
    write_text(&dir.join("subgroups.csv"), &subgroups.to_csv())?;
    if let Some(o) = &overlap {
        write_json(&dir.join("propagation_overlap.json"), o)?;
    }
    if ctx.cfg.eval.plots {
        write_text(
            &dir.join("horizon_mae.svg"),
            &plot::horizon_mae_svg(&metrics),
        )?;
    }
    for (name, m) in &metrics.models {
        log::info!(
            "eval: {name} MAE {:.4} F1 {:.4}",
            m.overall.mae,
            m.overall.f1
        );
    }
    write_manifest(&dir, "eval", &ctx.cfg)
}

pub fn explain(ctx: &Context) -> Result<()> {
    let fdir = ctx.dir("forecast");
    let days: Vec<NaiveDate> = read_json(&fdir.join("test_days.json"))?;
    let dir = ctx.dir("explain");
    fresh_dir(&dir)?;

    let att_days: Vec<NaiveDate> = days
        .iter()
        .copied()
        .filter(|d| fdir.join("attention").join(format!("{d}.csv")).exists())
        .collect();
    if att_days.is_empty() {
        log::warn!("explain: no attention logs, skipping attention analysis");
    } else {
        let graphs = load_days(ctx, &att_days)?;
        let mut scores = Vec::new();
        for d in &att_days {
            let records = read_attention_log(&fdir.join("attention").join(format!("{d}.csv")))?;
            scores.extend(reduce_attention(*d, &records, ctx.cfg.explain.layer_pool));
        }
        let table = edge_feature_table(&scores, &graphs)?;
        let analysis = attention_analysis(&scores, ctx.cfg.explain.percentile, &table)?;
        write_json(&dir.join("attention_analysis.json"), &analysis)?;
        if ctx.cfg.eval.plots {
            write_text(
                &dir.join("attention_proportions.svg"),
                &plot::attention_proportions_svg(&analysis),
            )?;
        }
    }

    let n = ctx.cfg.explain.importance_days.min(days.len());
    if n > 0 && !ctx.cfg.explain.features.is_empty() {
        let graphs = load_days(ctx, &days[..n])?;
        let (gc, gr) = (
            load_model(ctx, GAT_CLASSIFIER)?,
            load_model(ctx, GAT_REGRESSOR)?,
        );
        let fcfg = ctx.cfg.forecast_config();
        let hurdle = Hurdle {
            classifier: &gc,
            regressor: &gr,
            threshold: fcfg.threshold,
        };
        let names: Vec<&str> = ctx
            .cfg
            .explain
            .features
            .iter()
            .map(String::as_str)
            .collect();
        let report = permutation_importance(
            &graphs,
            &hurdle,
            GAT_MODEL,
            &fcfg,
            &names,
            ctx.cfg.explain.repetitions,
            ctx.cfg.seed,
            ctx.jobs,
        )?;
        write_json(&dir.join("feature_importance.json"), &report)?;
        write_text(&dir.join("feature_importance.csv"), &report.to_csv())?;
        if let Some(top) = report.ranked().first() {
            log::info!(
                "explain: top feature {} (+{:.4} MAE)",
                top.feature,
                top.importance
            );
        }
    }
    write_manifest(&dir, "explain", &ctx.cfg)
}

/// Every stage in order on freshly generated synthetic data.
pub fn pipeline(ctx: &Context) -> Result<()> {
    synth(ctx)?;
    ingest(ctx, Some(&ctx.dir("data").join("records.csv")))?;
    graph(ctx)?;
    train_models(ctx)?;
    forecast(ctx)?;
    evaluate(ctx)?;
    explain(ctx)
}
