//! Metrics broken down by delay magnitude and operational context.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{row_metrics, Metrics};
use crate::error::{Error, Result};
use crate::forecast::{EventKey, EventMeta, PredictionRow};

/// Labels of the true-delay bins, in order.
pub const MAGNITUDE_BINS: [&str; 5] = ["0", "(0,5]", "(5,15]", "(15,60]", ">60"];

fn magnitude_bin(delay: f64) -> &'static str {
    match delay {
        d if d <= 0.0 => MAGNITUDE_BINS[0],
        d if d <= 5.0 => MAGNITUDE_BINS[1],
        d if d <= 15.0 => MAGNITUDE_BINS[2],
        d if d <= 60.0 => MAGNITUDE_BINS[3],
        _ => MAGNITUDE_BINS[4],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubgroupConfig {
    /// Busiest stations reported individually; the rest pool into `other`.
    pub top_stations: usize,
}

impl Default for SubgroupConfig {
    fn default() -> Self {
        Self { top_stations: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub axis: String,
    pub bucket: String,
    pub count: usize,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SubgroupReport {
    pub models: BTreeMap<String, Vec<Bucket>>,
}

fn flag(b: bool, yes: &str, no: &str) -> String {
    if b { yes } else { no }.to_string()
}

/// Per-model metrics along every axis. Each axis partitions the log.
pub fn subgroup_eval(
    rows: &[PredictionRow],
    meta: &[EventMeta],
    cfg: &SubgroupConfig,
) -> Result<SubgroupReport> {
    let by_key: HashMap<EventKey, &EventMeta> = meta.iter().map(|m| (m.key(), m)).collect();
    let mut busy: HashMap<&str, usize> = HashMap::new();
    for m in meta {
        *busy.entry(m.station.as_str()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = busy.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let top: Vec<&str> = ranked
        .iter()
        .take(cfg.top_stations)
        .map(|&(s, _)| s)
        .collect();
    let mut train_types: Vec<&str> = meta.iter().map(|m| m.train_type.as_str()).collect();
    train_types.sort();
    train_types.dedup();

    // Fixed bucket lists keep empty buckets visible.
    let axes: Vec<(&str, Vec<String>)> = vec![
        (
            "delay_magnitude",
            MAGNITUDE_BINS.iter().map(|s| s.to_string()).collect(),
        ),
        ("peak", vec!["peak".into(), "off_peak".into()]),
        ("weekend", vec!["weekend".into(), "weekday".into()]),
        ("holiday", vec!["holiday".into(), "regular".into()]),
        (
            "train_type",
            train_types.iter().map(|s| s.to_string()).collect(),
        ),
        (
            "station",
            top.iter()
                .map(|s| s.to_string())
                .chain(["other".to_string()])
                .collect(),
        ),
    ];
    let label = |axis: &str, r: &PredictionRow, m: &EventMeta| -> String {
        match axis {
            "delay_magnitude" => magnitude_bin(r.true_delay).to_string(),
            "peak" => flag(m.is_peak, "peak", "off_peak"),
            "weekend" => flag(m.is_weekend, "weekend", "weekday"),
            "holiday" => flag(m.is_holiday, "holiday", "regular"),
            "train_type" => m.train_type.clone(),
            _ if top.contains(&m.station.as_str()) => m.station.clone(),
            _ => "other".into(),
        }
    };

    let mut report = SubgroupReport::default();
    for (model, rows) in crate::forecast::by_model(rows) {
        let joined = rows
            .iter()
            .map(|r| {
                by_key.get(&r.key()).map(|m| (*r, *m)).ok_or_else(|| {
                    Error::DataIntegrity(format!(
                        "no metadata for {} {} stop {} {}",
                        r.service_day,
                        r.trip_id,
                        r.stop_index,
                        r.event_kind.as_str()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut buckets = Vec::new();
        for (axis, names) in &axes {
            let mut groups: BTreeMap<String, Vec<&PredictionRow>> = BTreeMap::new();
            for &(r, m) in &joined {
                groups.entry(label(axis, r, m)).or_default().push(r);
            }
            for name in names {
                let members = groups.remove(name).unwrap_or_default();
                buckets.push(Bucket {
                    axis: axis.to_string(),
                    bucket: name.clone(),
                    count: members.len(),
                    metrics: if members.is_empty() {
                        None
                    } else {
                        Some(row_metrics(members)?)
                    },
                });
            }
        }
        report.models.insert(model.to_string(), buckets);
    }
    Ok(report)
}

impl SubgroupReport {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,axis,bucket,count,mae,rmse,accuracy,precision,recall,f1\n");
        for (model, buckets) in &self.models {
            for b in buckets {
                let cols = b.metrics.map_or_else(
                    || ",,,,,".to_string(),
                    |m| {
                        format!(
                            "{},{},{},{},{},{}",
                            m.mae, m.rmse, m.accuracy, m.precision, m.recall, m.f1
                        )
                    },
                );
                writeln!(out, "{model},{},{},{},{cols}", b.axis, b.bucket, b.count)
                    .expect("string write");
            }
        }
        out
    }
}
