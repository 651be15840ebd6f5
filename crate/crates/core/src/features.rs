//! Node and edge feature engineering.
//!
//! Durations follow the realized-time definitions (run: arrival minus previous
//! departure; dwell: departure minus arrival; headway: follower arrival minus
//! leader arrival), each with a scheduled-time variant for future edges.
//! Congestion counts are computed from the timetable so they never depend on
//! realized times.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::f64::consts::PI;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two arrivals interact only if scheduled at most this far apart.
pub const HEADWAY_WINDOW_MINUTES: i64 = 30;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Cap for `minutes_since_last_train_clipped`.
    pub congestion_cap_minutes: f64,
    pub holidays: BTreeSet<NaiveDate>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            congestion_cap_minutes: 120.0,
            holidays: BTreeSet::new(),
        }
    }
}

/// Scheduled and (when known) realized time of one event, in epoch minutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventTime {
    pub scheduled: i64,
    pub actual: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeMode {
    Actual,
    Scheduled,
}

impl EventTime {
    fn at(&self, mode: TimeMode) -> Result<i64> {
        match mode {
            TimeMode::Scheduled => Ok(self.scheduled),
            TimeMode::Actual => self
                .actual
                .ok_or_else(|| Error::DataIntegrity("actual time unknown".into())),
        }
    }
}

fn non_negative(what: &str, d: i64) -> Result<f64> {
    if d < 0 {
        Err(Error::DataIntegrity(format!(
            "negative {what} duration {d}"
        )))
    } else {
        Ok(d as f64)
    }
}

/// Minutes from the departure at stop i-1 to the arrival at stop i.
pub fn running_duration(dep: EventTime, arr: EventTime, mode: TimeMode) -> Result<f64> {
    non_negative("running", arr.at(mode)? - dep.at(mode)?)
}

/// Minutes from the arrival to the departure at the same stop.
pub fn dwelling_duration(arr: EventTime, dep: EventTime, mode: TimeMode) -> Result<f64> {
    non_negative("dwelling", dep.at(mode)? - arr.at(mode)?)
}

/// Follower arrival minus leader arrival at the same station. May be negative
/// when the realized order inverts the scheduled one.
pub fn headway_duration(follower: EventTime, leader: EventTime, mode: TimeMode) -> Result<f64> {
    Ok((follower.at(mode)? - leader.at(mode)?) as f64)
}

/// Headway duration implied by the scheduled gap and the two trains' delays.
pub fn headway_from_delays(scheduled_gap: f64, leader_delay: f64, follower_delay: f64) -> f64 {
    scheduled_gap + follower_delay - leader_delay
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledStop {
    pub station: String,
    pub platform: Option<String>,
    pub arrival: Option<i64>,
    pub departure: Option<i64>,
}

/// The timetable of one trip; kept as graph metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripSchedule {
    pub trip_id: String,
    pub train_type: String,
    pub stops: Vec<ScheduledStop>,
}

impl TripSchedule {
    pub fn stop_at(&self, station: &str) -> Option<usize> {
        self.stops.iter().position(|s| s.station == station)
    }

    pub fn next_station(&self, stop: usize) -> Option<&str> {
        self.stops.get(stop + 1).map(|s| s.station.as_str())
    }
}

/// Whether two trips interact on headway at `station`: scheduled arrivals at
/// most 30 minutes apart and the same next scheduled station.
pub fn headway_eligible(a: &TripSchedule, b: &TripSchedule, station: &str) -> bool {
    if a.trip_id == b.trip_id {
        return false;
    }
    let (Some(ia), Some(ib)) = (a.stop_at(station), b.stop_at(station)) else {
        return false;
    };
    let (Some(ta), Some(tb)) = (a.stops[ia].arrival, b.stops[ib].arrival) else {
        return false;
    };
    if (ta - tb).abs() > HEADWAY_WINDOW_MINUTES {
        return false;
    }
    matches!((a.next_station(ia), b.next_station(ib)), (Some(x), Some(y)) if x == y)
}

/// (sin, cos) of the time of day on a 1440-minute circle.
pub fn cyclical_encode(minute_of_day: u32) -> Result<(f64, f64)> {
    if minute_of_day >= 1440 {
        return Err(Error::DataIntegrity(format!(
            "time of day {minute_of_day} out of range"
        )));
    }
    let angle = 2.0 * PI * minute_of_day as f64 / 1440.0;
    Ok((angle.sin(), angle.cos()))
}

/// Rush hours 06:30-09:00 and 16:00-18:30, closed-open.
pub fn peak_flag(minute_of_day: u32) -> bool {
    (390..540).contains(&minute_of_day) || (960..1110).contains(&minute_of_day)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatformCongestion {
    pub train_count_last_60min: u32,
    pub minutes_since_last_train: f64,
    pub platform_known: bool,
}

/// Timetable-derived movement index for one service day.
#[derive(Debug, Clone, Default)]
pub struct DayHistory {
    /// (station, platform) -> [(scheduled arrival, trip)]
    arrivals: HashMap<(String, String), Vec<(i64, usize)>>,
    /// station -> [(scheduled movement time, trip)]
    movements: HashMap<String, Vec<(i64, usize)>>,
}

impl DayHistory {
    pub fn from_schedules(trips: &[TripSchedule]) -> Self {
        let mut h = DayHistory::default();
        for (ti, t) in trips.iter().enumerate() {
            for s in &t.stops {
                if let (Some(a), Some(p)) = (s.arrival, &s.platform) {
                    h.add_arrival(&s.station, p, a, ti);
                }
                for m in [s.arrival, s.departure].into_iter().flatten() {
                    h.add_movement(&s.station, m, ti);
                }
            }
        }
        h
    }

    pub fn add_arrival(&mut self, station: &str, platform: &str, time: i64, trip: usize) {
        self.arrivals
            .entry((station.to_string(), platform.to_string()))
            .or_default()
            .push((time, trip));
    }

    pub fn add_movement(&mut self, station: &str, time: i64, trip: usize) {
        self.movements
            .entry(station.to_string())
            .or_default()
            .push((time, trip));
    }

    /// Other-train arrivals at the platform in (t-60, t] and minutes since the
    /// latest of them (capped; the cap when there is none).
    pub fn platform_congestion(
        &self,
        station: &str,
        platform: Option<&str>,
        t: i64,
        own_trip: usize,
        cap: f64,
    ) -> PlatformCongestion {
        let none = PlatformCongestion {
            train_count_last_60min: 0,
            minutes_since_last_train: cap,
            platform_known: false,
        };
        let Some(platform) = platform else {
            return none;
        };
        let Some(list) = self
            .arrivals
            .get(&(station.to_string(), platform.to_string()))
        else {
            return PlatformCongestion {
                platform_known: true,
                ..none
            };
        };
        let mut count = 0;
        let mut latest: Option<i64> = None;
        for &(time, trip) in list {
            if trip == own_trip || time > t {
                continue;
            }
            if time > t - 60 {
                count += 1;
            }
            latest = Some(latest.map_or(time, |l: i64| l.max(time)));
        }
        PlatformCongestion {
            train_count_last_60min: count,
            minutes_since_last_train: latest.map_or(cap, |l| ((t - l) as f64).min(cap)),
            platform_known: true,
        }
    }

    /// Other-train movements at the station in [t-5, t+5].
    pub fn station_congestion(&self, station: &str, t: i64, own_trip: usize) -> u32 {
        self.movements.get(station).map_or(0, |list| {
            list.iter()
                .filter(|&&(time, trip)| trip != own_trip && (t - 5..=t + 5).contains(&time))
                .count() as u32
        })
    }
}

/// Delay two stops back on the same trip; zero without two prior stops.
pub fn lag2_delay(stop_index: u32, delay_at_stop: impl Fn(u32) -> Option<f64>) -> f64 {
    if stop_index < 2 {
        return 0.0;
    }
    delay_at_stop(stop_index - 2).unwrap_or(0.0)
}

/// Engineered features of one event node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeFeatureVector {
    pub arrival_tod_sin: f64,
    pub arrival_tod_cos: f64,
    pub day_of_week: u32,
    pub is_weekend: bool,
    pub is_holiday: bool,
    pub is_peak: bool,
    pub is_origin_stop: bool,
    pub is_terminal_stop: bool,
    pub platform_known: bool,
    pub prev_stop_cancelled: bool,
    pub month: u32,
    pub number_of_stops_left: u32,
    pub num_prev_cancelled: u32,
    pub lag2_delay: f64,
    pub train_count_last_60min: u32,
    pub minutes_since_last_train_clipped: f64,
    pub inbound_trains_near_arrival: u32,
    pub train_type: String,
    pub stop_name: String,
    pub platform_scheduled: Option<String>,
}

/// Every shuffleable node feature, by name.
pub const FEATURE_NAMES: [&str; 20] = [
    "lag2_delay",
    "number_of_stops_left",
    "num_prev_cancelled",
    "train_count_last_60min",
    "minutes_since_last_train_clipped",
    "inbound_trains_near_arrival",
    "arrival_tod_sin",
    "arrival_tod_cos",
    "is_weekend",
    "is_holiday",
    "is_peak",
    "is_origin_stop",
    "is_terminal_stop",
    "platform_known",
    "prev_stop_cancelled",
    "day_of_week",
    "month",
    "train_type",
    "stop_name",
    "platform_scheduled",
];

/// Continuous features passed through log1p and standardization.
pub const LOG_FEATURES: [&str; 6] = [
    "lag2_delay",
    "number_of_stops_left",
    "num_prev_cancelled",
    "train_count_last_60min",
    "minutes_since_last_train_clipped",
    "inbound_trains_near_arrival",
];

/// Number of dense model inputs: 6 scaled + 2 cyclical + 7 flags.
pub const DENSE_WIDTH: usize = 15;
/// Number of categorical model inputs.
pub const CATEGORICAL_COUNT: usize = 5;

/// Where a named feature lives in the encoded node input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSlot {
    Dense(usize),
    Categorical(usize),
}

pub fn feature_slot(name: &str) -> Option<FeatureSlot> {
    let i = FEATURE_NAMES.iter().position(|n| *n == name)?;
    Some(if i < DENSE_WIDTH {
        FeatureSlot::Dense(i)
    } else {
        FeatureSlot::Categorical(i - DENSE_WIDTH)
    })
}

impl NodeFeatureVector {
    fn raw_log_feature(&self, i: usize) -> f64 {
        match i {
            0 => self.lag2_delay,
            1 => self.number_of_stops_left as f64,
            2 => self.num_prev_cancelled as f64,
            3 => self.train_count_last_60min as f64,
            4 => self.minutes_since_last_train_clipped,
            5 => self.inbound_trains_near_arrival as f64,
            _ => unreachable!(),
        }
    }

    fn flags(&self) -> [bool; 7] {
        [
            self.is_weekend,
            self.is_holiday,
            self.is_peak,
            self.is_origin_stop,
            self.is_terminal_stop,
            self.platform_known,
            self.prev_stop_cancelled,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transform {
    Log1p,
    /// sign(x) * log1p(|x|), for durations that may be negative.
    SignedLog1p,
}

impl Transform {
    fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Log1p => x.max(0.0).ln_1p(),
            Transform::SignedLog1p => x.signum() * x.abs().ln_1p(),
        }
    }

    fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Log1p => y.exp_m1(),
            Transform::SignedLog1p => y.signum() * y.abs().exp_m1(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledFeature {
    pub name: String,
    pub transform: Transform,
    pub mean: f64,
    pub std: f64,
}

/// Per-feature standardization of transformed values, fit on training data.
/// Zero-variance features are excluded and map to 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub features: Vec<ScaledFeature>,
    pub excluded: Vec<String>,
}

impl FeatureScaler {
    pub fn fit(columns: &[(&str, Transform, &[f64])]) -> Result<Self> {
        let mut scaler = FeatureScaler::default();
        for &(name, transform, values) in columns {
            if values.is_empty() {
                return Err(Error::Config(format!(
                    "cannot fit scaler on empty `{name}`"
                )));
            }
            let n = values.len() as f64;
            let t: Vec<f64> = values.iter().map(|&x| transform.forward(x)).collect();
            let mean = t.iter().sum::<f64>() / n;
            let var = t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            if std < 1e-12 {
                log::warn!("feature `{name}` has zero variance; excluded from scaling");
                scaler.excluded.push(name.to_string());
            } else {
                scaler.features.push(ScaledFeature {
                    name: name.to_string(),
                    transform,
                    mean,
                    std,
                });
            }
        }
        Ok(scaler)
    }

    fn get(&self, name: &str) -> Option<&ScaledFeature> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn apply(&self, name: &str, x: f64) -> f64 {
        self.get(name)
            .map_or(0.0, |f| (f.transform.forward(x) - f.mean) / f.std)
    }

    pub fn inverse(&self, name: &str, z: f64) -> Option<f64> {
        self.get(name)
            .map(|f| f.transform.inverse(z * f.std + f.mean))
    }

    /// A standalone affine view of one feature, for hot loops.
    pub fn affine(&self, name: &str) -> Affine {
        self.get(name).map_or(Affine::ZERO, |f| Affine {
            transform: f.transform,
            mean: f.mean,
            std: f.std,
            active: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub transform: Transform,
    pub mean: f64,
    pub std: f64,
    pub active: bool,
}

impl Affine {
    const ZERO: Affine = Affine {
        transform: Transform::Log1p,
        mean: 0.0,
        std: 1.0,
        active: false,
    };

    pub fn apply(&self, x: f64) -> f64 {
        if self.active {
            (self.transform.forward(x) - self.mean) / self.std
        } else {
            0.0
        }
    }
}

/// Dense string <-> index map with index 0 reserved for unknown/absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    map: BTreeMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = tokens.into_iter().collect();
        let tokens: Vec<String> = set.into_iter().map(str::to_string).collect();
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + 1))
            .collect();
        Self { map, tokens }
    }

    pub fn index(&self, token: Option<&str>) -> usize {
        token.and_then(|t| self.map.get(t).copied()).unwrap_or(0)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.tokens.get(i))
            .map(String::as_str)
    }

    /// Size including the reserved unknown slot.
    pub fn len(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn to_json_map(&self) -> &BTreeMap<String, usize> {
        &self.map
    }

    pub fn from_json_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![String::new(); map.len()];
        for (t, &i) in &map {
            if i == 0 || i > map.len() || !tokens[i - 1].is_empty() {
                return Err(Error::Serde(format!(
                    "invalid vocabulary index {i} for `{t}`"
                )));
            }
            tokens[i - 1] = t.clone();
        }
        Ok(Self { map, tokens })
    }
}

/// Everything needed to turn raw features into model inputs: scalers fit on
/// the training split and the categorical vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub node_scaler: FeatureScaler,
    pub edge_scaler: FeatureScaler,
    pub train_types: Vocabulary,
    pub stations: Vocabulary,
    pub platforms: Vocabulary,
}

pub const EDGE_DURATION: &str = "edge_duration";

impl Preprocessor {
    /// Fit on training-split node features and edge durations.
    pub fn fit<'a>(
        nodes: impl IntoIterator<Item = &'a NodeFeatureVector>,
        edge_durations: &[f64],
    ) -> Result<Self> {
        let nodes: Vec<&NodeFeatureVector> = nodes.into_iter().collect();
        let columns: Vec<Vec<f64>> = (0..LOG_FEATURES.len())
            .map(|i| nodes.iter().map(|n| n.raw_log_feature(i)).collect())
            .collect();
        let spec: Vec<(&str, Transform, &[f64])> = LOG_FEATURES
            .iter()
            .zip(&columns)
            .map(|(n, c)| (*n, Transform::Log1p, c.as_slice()))
            .collect();
        let node_scaler = FeatureScaler::fit(&spec)?;
        let edge_scaler =
            FeatureScaler::fit(&[(EDGE_DURATION, Transform::SignedLog1p, edge_durations)])?;
        Ok(Self {
            node_scaler,
            edge_scaler,
            train_types: Vocabulary::build(nodes.iter().map(|n| n.train_type.as_str())),
            stations: Vocabulary::build(nodes.iter().map(|n| n.stop_name.as_str())),
            platforms: Vocabulary::build(
                nodes.iter().filter_map(|n| n.platform_scheduled.as_deref()),
            ),
        })
    }

    /// Dense inputs (with lag2 at slot 0) and categorical indices of one node.
    pub fn encode(
        &self,
        f: &NodeFeatureVector,
    ) -> ([f64; DENSE_WIDTH], [usize; CATEGORICAL_COUNT]) {
        let mut dense = [0.0; DENSE_WIDTH];
        for (i, name) in LOG_FEATURES.iter().enumerate() {
            dense[i] = self.node_scaler.apply(name, f.raw_log_feature(i));
        }
        dense[6] = f.arrival_tod_sin;
        dense[7] = f.arrival_tod_cos;
        for (i, flag) in f.flags().into_iter().enumerate() {
            dense[8 + i] = if flag { 1.0 } else { 0.0 };
        }
        let cats = [
            f.day_of_week as usize,
            f.month as usize,
            self.train_types.index(Some(&f.train_type)),
            self.stations.index(Some(&f.stop_name)),
            self.platforms.index(f.platform_scheduled.as_deref()),
        ];
        (dense, cats)
    }

    /// Cardinalities of the categorical inputs, in slot order.
    pub fn categorical_sizes(&self) -> [usize; CATEGORICAL_COUNT] {
        [
            7,
            13,
            self.train_types.len(),
            self.stations.len(),
            self.platforms.len(),
        ]
    }
}
