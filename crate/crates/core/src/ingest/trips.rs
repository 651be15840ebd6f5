use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::records::RawStopRecord;
use crate::error::{Error, Result};
use crate::time::to_minutes;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripIdConfig {
    /// Maximum gap between the terminating arrival of one train number and the
    /// originating departure of its continuation.
    pub handover_tolerance_minutes: i64,
}

impl Default for TripIdConfig {
    fn default() -> Self {
        Self {
            handover_tolerance_minutes: 2,
        }
    }
}

/// Give every record a trip id, joining train numbers that hand over to each
/// other mid-journey.
///
/// Records that already carry a trip id keep it. The rest are grouped per
/// (service day, train number); a segment that terminates at a station is
/// joined to a segment of the same train type originating there within the
/// tolerance, provided the match is unique in both directions.
pub fn assign_trip_ids(records: Vec<RawStopRecord>, cfg: &TripIdConfig) -> Vec<RawStopRecord> {
    let mut out = Vec::with_capacity(records.len());
    let mut by_day: BTreeMap<NaiveDate, BTreeMap<String, Vec<RawStopRecord>>> = BTreeMap::new();
    for r in records {
        if r.trip_id.is_empty() {
            by_day
                .entry(r.service_day)
                .or_default()
                .entry(r.train_number.clone())
                .or_default()
                .push(r);
        } else {
            out.push(r);
        }
    }

    for (day, segments) in by_day {
        let mut segs: Vec<Vec<RawStopRecord>> = segments
            .into_values()
            .map(|mut s| {
                s.sort_by_key(|r| r.stop_index);
                s
            })
            .collect();

        let n = segs.len();
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
        for a in 0..n {
            let last = segs[a].last().expect("non-empty segment");
            let Some(arr) = last.scheduled_arrival else {
                continue;
            };
            if last.scheduled_departure.is_some() {
                continue;
            }
            for b in 0..n {
                if a == b {
                    continue;
                }
                let first = &segs[b][0];
                let Some(dep) = first.scheduled_departure else {
                    continue;
                };
                if first.scheduled_arrival.is_some()
                    || first.station_code != last.station_code
                    || first.train_type != last.train_type
                {
                    continue;
                }
                let gap = to_minutes(dep) - to_minutes(arr);
                if (-cfg.handover_tolerance_minutes..=cfg.handover_tolerance_minutes).contains(&gap)
                {
                    succ[a].push(b);
                    pred[b].push(a);
                }
            }
        }

        let mut next = vec![None; n];
        let mut has_pred = vec![false; n];
        for a in 0..n {
            match succ[a].as_slice() {
                [b] if pred[*b].len() == 1 => {
                    next[a] = Some(*b);
                    has_pred[*b] = true;
                }
                [] => {}
                many => log::info!(
                    "{day}: ambiguous handover for train {} ({} candidates); kept separate",
                    segs[a][0].train_number,
                    many.len()
                ),
            }
        }

        for start in 0..n {
            if has_pred[start] {
                continue;
            }
            let mut chain = vec![start];
            let mut cur = start;
            while let Some(b) = next[cur] {
                if chain.contains(&b) {
                    break;
                }
                chain.push(b);
                cur = b;
            }
            let trip_id = format!("{}_{}", day.format("%Y-%m-%d"), segs[start][0].train_number);
            if chain.len() == 1 {
                for mut r in std::mem::take(&mut segs[start]) {
                    r.trip_id = trip_id.clone();
                    out.push(r);
                }
                continue;
            }
            let mut merged: Vec<RawStopRecord> = Vec::new();
            for &s in &chain {
                let seg = std::mem::take(&mut segs[s]);
                let mut iter = seg.into_iter();
                if let Some(prev) = merged.last_mut() {
                    let first = iter.next().expect("non-empty segment");
                    prev.train_number = first.train_number;
                    prev.scheduled_departure = first.scheduled_departure;
                    prev.actual_departure = first.actual_departure;
                    prev.cancelled_departure = first.cancelled_departure;
                    if first.platform_scheduled.is_some() {
                        prev.platform_scheduled = first.platform_scheduled;
                        prev.platform_actual = first.platform_actual;
                    }
                }
                merged.extend(iter);
            }
            for (i, mut r) in merged.into_iter().enumerate() {
                r.trip_id = trip_id.clone();
                r.stop_index = i as u32;
                out.push(r);
            }
        }
    }

    out.sort_by(|a, b| {
        (a.service_day, &a.trip_id, a.stop_index).cmp(&(b.service_day, &b.trip_id, b.stop_index))
    });
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CleaningConfig {
    /// Train types treated as non-standard services (compared case-insensitively).
    pub non_standard_types: Vec<String>,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        Self {
            non_standard_types: [
                "Bus",
                "Snelbus",
                "Stopbus",
                "Treinvervangende bus",
                "Rail replacement bus",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        }
    }
}

/// Number of removed records per cleaning category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub input_records: usize,
    pub non_standard: usize,
    pub fully_cancelled: usize,
    pub cancelled_stops: usize,
    pub illogical_sequence: usize,
    pub missing_actual: usize,
    pub too_short: usize,
}

impl CleaningReport {
    pub fn removed(&self) -> usize {
        self.non_standard
            + self.fully_cancelled
            + self.cancelled_stops
            + self.illogical_sequence
            + self.missing_actual
            + self.too_short
    }
}

/// A retained stop together with the cancellation context lost by cleaning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanStop {
    pub record: RawStopRecord,
    pub prev_stop_cancelled: bool,
    pub num_prev_cancelled: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanTrip {
    pub service_day: NaiveDate,
    pub trip_id: String,
    pub train_type: String,
    pub stops: Vec<CleanStop>,
}

impl CleanTrip {
    pub fn stations(&self) -> impl Iterator<Item = &str> {
        self.stops.iter().map(|s| s.record.station_code.as_str())
    }
}

/// Flatten trips back into stop records.
pub fn records_of(trips: &[CleanTrip]) -> Vec<RawStopRecord> {
    trips
        .iter()
        .flat_map(|t| t.stops.iter().map(|s| s.record.clone()))
        .collect()
}

fn is_cancelled(r: &RawStopRecord) -> bool {
    r.cancelled_arrival || r.cancelled_departure
}

fn missing_actual(r: &RawStopRecord) -> bool {
    (r.scheduled_arrival.is_some() && r.actual_arrival.is_none())
        || (r.scheduled_departure.is_some() && r.actual_departure.is_none())
}

fn self_inconsistent(r: &RawStopRecord) -> bool {
    matches!((r.actual_arrival, r.actual_departure), (Some(a), Some(d)) if d < a)
        || matches!((r.scheduled_arrival, r.scheduled_departure), (Some(a), Some(d)) if d < a)
}

fn breaks_sequence(prev: &RawStopRecord, r: &RawStopRecord) -> bool {
    matches!((prev.actual_departure, r.actual_arrival), (Some(d), Some(a)) if a < d)
        || matches!((prev.scheduled_departure, r.scheduled_arrival), (Some(d), Some(a)) if a < d)
}

/// Remove corrupt and non-standard observations, producing one consistent
/// event sequence per trip. Nothing is imputed.
pub fn clean(
    records: Vec<RawStopRecord>,
    cfg: &CleaningConfig,
) -> (Vec<CleanTrip>, CleaningReport) {
    let mut report = CleaningReport {
        input_records: records.len(),
        ..Default::default()
    };
    let denylist: HashSet<String> = cfg
        .non_standard_types
        .iter()
        .map(|s| s.to_lowercase())
        .collect();

    let mut grouped: BTreeMap<(NaiveDate, String), Vec<RawStopRecord>> = BTreeMap::new();
    for r in records {
        grouped
            .entry((r.service_day, r.trip_id.clone()))
            .or_default()
            .push(r);
    }

    let mut trips = Vec::new();
    for ((service_day, trip_id), mut stops) in grouped {
        stops.sort_by_key(|r| r.stop_index);
        if stops
            .iter()
            .any(|r| denylist.contains(&r.train_type.to_lowercase()))
        {
            report.non_standard += stops.len();
            continue;
        }
        if stops.iter().all(is_cancelled) {
            report.fully_cancelled += stops.len();
            continue;
        }

        let mut kept: Vec<CleanStop> = Vec::with_capacity(stops.len());
        let mut cancelled_so_far = 0u32;
        let mut last_was_cancelled = false;
        for r in stops {
            if is_cancelled(&r) {
                report.cancelled_stops += 1;
                cancelled_so_far += 1;
                last_was_cancelled = true;
                continue;
            }
            let cancelled_before = last_was_cancelled;
            last_was_cancelled = false;
            if missing_actual(&r) {
                report.missing_actual += 1;
                continue;
            }
            if self_inconsistent(&r) || kept.last().is_some_and(|p| breaks_sequence(&p.record, &r))
            {
                report.illogical_sequence += 1;
                continue;
            }
            kept.push(CleanStop {
                record: r,
                prev_stop_cancelled: cancelled_before,
                num_prev_cancelled: cancelled_so_far,
            });
        }

        if kept.len() < 2 {
            report.too_short += kept.len();
            continue;
        }
        let last = kept.len() - 1;
        for (i, s) in kept.iter_mut().enumerate() {
            s.record.stop_index = i as u32;
            if i == 0 {
                s.record.scheduled_arrival = None;
                s.record.actual_arrival = None;
                s.record.cancelled_arrival = false;
            }
            if i == last {
                s.record.scheduled_departure = None;
                s.record.actual_departure = None;
                s.record.cancelled_departure = false;
            }
        }
        let train_type = kept[0].record.train_type.clone();
        trips.push(CleanTrip {
            service_day,
            trip_id,
            train_type,
            stops: kept,
        });
    }
    (trips, report)
}

/// Keep the trips with at least one stop in `stations`.
pub fn filter_region(trips: Vec<CleanTrip>, stations: &BTreeSet<String>) -> Result<Vec<CleanTrip>> {
    if stations.is_empty() {
        return Err(Error::Config("region station set is empty".into()));
    }
    Ok(trips
        .into_iter()
        .filter(|t| t.stations().any(|s| stations.contains(s)))
        .collect())
}

pub fn group_by_day(trips: Vec<CleanTrip>) -> BTreeMap<NaiveDate, Vec<CleanTrip>> {
    let mut days: BTreeMap<NaiveDate, Vec<CleanTrip>> = BTreeMap::new();
    for t in trips {
        days.entry(t.service_day).or_default().push(t);
    }
    days
}
