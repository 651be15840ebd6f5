//! Synthetic line-and-junction networks with a known delay-propagation rule.
//!
//! Realized times follow a deterministic rule driven by seeded primary delays:
//! delays ride along runs unchanged, each dwell recovers up to
//! `dwell_recovery` minutes (floored at zero), and a follower arriving within
//! the headway window of a leader (same station, same next station) inherits
//! `headway_propagation_fraction` of the leader's delay in excess of the
//! scheduled gap. Every injection and transfer is logged in [`GroundTruth`].

use std::collections::HashMap;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::RawStopRecord;
use crate::error::{Error, Result};
use crate::features::HEADWAY_WINDOW_MINUTES;
use crate::time::{from_minutes, midnight_minutes};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrimaryDelayMagnitude {
    /// Inclusive bounds of the uniform integer magnitude, in minutes.
    pub min: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub station_count: usize,
    pub trips_per_day: usize,
    pub day_count: usize,
    pub primary_delay_rate: f64,
    pub primary_delay_magnitude: PrimaryDelayMagnitude,
    pub headway_propagation_fraction: f64,
    pub dwell_recovery: u32,
    pub random_seed: u64,
    pub start_date: NaiveDate,
    /// Service window for origin departures, minutes after midnight.
    pub service_start_minute: u32,
    pub service_end_minute: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            station_count: 20,
            trips_per_day: 60,
            day_count: 60,
            primary_delay_rate: 0.06,
            primary_delay_magnitude: PrimaryDelayMagnitude { min: 2, max: 12 },
            headway_propagation_fraction: 0.7,
            dwell_recovery: 1,
            random_seed: 7,
            start_date: NaiveDate::from_ymd_opt(2022, 1, 3).expect("valid date"),
            service_start_minute: 6 * 60,
            service_end_minute: 14 * 60,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0,1], got {v}")))
            }
        };
        unit("primary_delay_rate", self.primary_delay_rate)?;
        unit(
            "headway_propagation_fraction",
            self.headway_propagation_fraction,
        )?;
        if self.station_count < 2 || self.trips_per_day < 1 || self.day_count < 1 {
            return Err(Error::Config(
                "station_count must be >= 2, trips_per_day and day_count >= 1".into(),
            ));
        }
        if self.primary_delay_magnitude.min > self.primary_delay_magnitude.max {
            return Err(Error::Config("primary delay magnitude min > max".into()));
        }
        if self.service_end_minute <= self.service_start_minute || self.service_end_minute > 1440 {
            return Err(Error::Config("invalid service window".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryDelay {
    pub trip_id: String,
    pub stop_index: u32,
    pub minutes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationEvent {
    pub from_trip: String,
    pub to_trip: String,
    pub station: String,
    pub minutes: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub primary_delays: Vec<PrimaryDelay>,
    pub propagation_events: Vec<PropagationEvent>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub records: Vec<RawStopRecord>,
    pub ground_truth: GroundTruth,
    pub holidays: Vec<NaiveDate>,
}

struct Pattern {
    stations: Vec<usize>,
    train_type: &'static str,
    platform: &'static str,
}

struct Network {
    codes: Vec<String>,
    patterns: Vec<Pattern>,
    run_minutes: HashMap<(usize, usize), i64>,
    junction: Option<usize>,
}

fn build_network(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Network {
    let n = cfg.station_count;
    let codes: Vec<String> = (0..n).map(|i| format!("S{i:02}")).collect();
    let mut patterns = Vec::new();
    let mut junction = None;
    if n < 5 {
        let trunk: Vec<usize> = (0..n).collect();
        patterns.push(Pattern {
            stations: trunk.clone(),
            train_type: "Intercity",
            platform: "1",
        });
        patterns.push(Pattern {
            stations: trunk.into_iter().rev().collect(),
            train_type: "Intercity",
            platform: "2",
        });
    } else {
        let branch_len = n * 2 / 5;
        let trunk_len = n - branch_len;
        let j = trunk_len / 3;
        junction = Some(j);
        let trunk: Vec<usize> = (0..trunk_len).collect();
        // Branch stations run outward from the junction; the branch line joins
        // the trunk at `j` and continues to the trunk's end.
        let mut branch: Vec<usize> = (trunk_len..n).rev().collect();
        branch.extend(j..trunk_len);
        patterns.push(Pattern {
            stations: trunk.clone(),
            train_type: "Intercity",
            platform: "1",
        });
        patterns.push(Pattern {
            stations: branch.clone(),
            train_type: "Sprinter",
            platform: "1",
        });
        patterns.push(Pattern {
            stations: trunk.into_iter().rev().collect(),
            train_type: "Intercity",
            platform: "2",
        });
        patterns.push(Pattern {
            stations: branch.into_iter().rev().collect(),
            train_type: "Sprinter",
            platform: "2",
        });
    }
    let mut run_minutes = HashMap::new();
    for p in &patterns {
        for w in p.stations.windows(2) {
            let key = (w[0].min(w[1]), w[0].max(w[1]));
            run_minutes
                .entry(key)
                .or_insert_with(|| rng.gen_range(3..=8));
        }
    }
    Network {
        codes,
        patterns,
        run_minutes,
        junction,
    }
}

/// One trip of the daily timetable: scheduled (arrival, departure) in minutes
/// after midnight per stop.
struct PlannedTrip {
    pattern: usize,
    train_number: String,
    times: Vec<(Option<i64>, Option<i64>)>,
}

fn build_timetable(cfg: &SyntheticConfig, net: &Network, rng: &mut ChaCha8Rng) -> Vec<PlannedTrip> {
    let p_count = net.patterns.len();
    let window = (cfg.service_end_minute - cfg.service_start_minute) as f64;
    let mut trips = Vec::with_capacity(cfg.trips_per_day);
    for i in 0..cfg.trips_per_day {
        let p = i % p_count;
        let q = i / p_count;
        let per_pattern = (cfg.trips_per_day - p).div_ceil(p_count);
        let jitter: i64 = rng.gen_range(-4..=4);
        let mut t = cfg.service_start_minute as i64
            + ((q as f64 + 0.5) * window / per_pattern as f64) as i64
            + jitter;
        t = t.max(0);
        let pattern = &net.patterns[p];
        let last = pattern.stations.len() - 1;
        let mut times = Vec::with_capacity(pattern.stations.len());
        for (k, &s) in pattern.stations.iter().enumerate() {
            let arr = if k == 0 {
                None
            } else {
                let prev = pattern.stations[k - 1];
                t += net.run_minutes[&(prev.min(s), prev.max(s))];
                Some(t)
            };
            let dep = if k == last {
                None
            } else if k == 0 {
                Some(t)
            } else {
                t += if Some(s) == net.junction { 2 } else { 1 };
                Some(t)
            };
            times.push((arr, dep));
        }
        trips.push(PlannedTrip {
            pattern: p,
            train_number: format!("{}{:03}", p + 1, q),
            times,
        });
    }
    trips
}

/// Departure delay after a dwell: the arrival delay less the recoverable
/// minutes (never below zero), plus any primary delay injected here. Origins
/// have no arrival and start from the injection alone.
pub(crate) fn departure_delay(
    arrival_delay: Option<i64>,
    dwell_recovery: u32,
    primary: i64,
) -> i64 {
    arrival_delay.map_or(0, |a| (a - dwell_recovery as i64).max(0)) + primary
}

fn holiday(day_index: usize) -> bool {
    day_index % 17 == 9
}

/// Generate the synthetic archive. Identical configs give identical output.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut net_rng = ChaCha8Rng::seed_from_u64(cfg.random_seed);
    let net = build_network(cfg, &mut net_rng);
    let plan = build_timetable(cfg, &net, &mut net_rng);

    let mut records = Vec::new();
    let mut truth = GroundTruth::default();
    let mut holidays = Vec::new();

    for d in 0..cfg.day_count {
        let day = cfg.start_date + Duration::days(d as i64);
        if holiday(d) {
            holidays.push(day);
        }
        let base = midnight_minutes(day);
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.random_seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(d as u64 + 1),
        );
        let trip_ids: Vec<String> = plan
            .iter()
            .map(|t| format!("{}_{}", day.format("%Y-%m-%d"), t.train_number))
            .collect();

        // (time, trip_id, kind: 0 = arrival, 1 = departure, trip, stop)
        let mut events: Vec<(i64, &str, u8, usize, usize)> = Vec::new();
        for (ti, t) in plan.iter().enumerate() {
            for (k, &(arr, dep)) in t.times.iter().enumerate() {
                if let Some(a) = arr {
                    events.push((a, &trip_ids[ti], 0, ti, k));
                }
                if let Some(dp) = dep {
                    events.push((dp, &trip_ids[ti], 1, ti, k));
                }
            }
        }
        events.sort();

        let mut arr_delay: Vec<Vec<i64>> = plan.iter().map(|t| vec![0; t.times.len()]).collect();
        let mut dep_delay = arr_delay.clone();
        // Arrivals processed so far per station: (sched, trip, stop)
        let mut arrivals_at: HashMap<usize, Vec<(i64, usize, usize)>> = HashMap::new();

        let next_station = |ti: usize, k: usize| -> Option<usize> {
            net.patterns[plan[ti].pattern].stations.get(k + 1).copied()
        };

        for &(sched, _, kind, ti, k) in &events {
            let station = net.patterns[plan[ti].pattern].stations[k];
            if kind == 0 {
                let mut delay = dep_delay[ti][k - 1];
                let mut best: Option<(i64, usize)> = None;
                if cfg.headway_propagation_fraction > 0.0 {
                    if let (Some(next), Some(prior)) =
                        (next_station(ti, k), arrivals_at.get(&station))
                    {
                        for &(l_sched, lt, lk) in prior {
                            let gap = sched - l_sched;
                            if gap > HEADWAY_WINDOW_MINUTES || next_station(lt, lk) != Some(next) {
                                continue;
                            }
                            let excess = (arr_delay[lt][lk] - gap).max(0) as f64;
                            let add = (cfg.headway_propagation_fraction * excess).round() as i64;
                            if add > 0 && best.is_none_or(|(b, _)| add > b) {
                                best = Some((add, lt));
                            }
                        }
                    }
                }
                if let Some((add, lt)) = best {
                    delay += add;
                    truth.propagation_events.push(PropagationEvent {
                        from_trip: trip_ids[lt].clone(),
                        to_trip: trip_ids[ti].clone(),
                        station: net.codes[station].clone(),
                        minutes: add as u32,
                    });
                }
                arr_delay[ti][k] = delay;
                arrivals_at.entry(station).or_default().push((sched, ti, k));
            } else {
                let arrival = (k > 0).then(|| arr_delay[ti][k]);
                let mut primary = 0;
                if rng.gen::<f64>() < cfg.primary_delay_rate {
                    let m = &cfg.primary_delay_magnitude;
                    primary = rng.gen_range(m.min..=m.max) as i64;
                    if primary > 0 {
                        truth.primary_delays.push(PrimaryDelay {
                            trip_id: trip_ids[ti].clone(),
                            stop_index: k as u32,
                            minutes: primary as u32,
                        });
                    }
                }
                dep_delay[ti][k] = departure_delay(arrival, cfg.dwell_recovery, primary);
            }
        }

        for (ti, t) in plan.iter().enumerate() {
            let pattern = &net.patterns[t.pattern];
            for (k, &(arr, dep)) in t.times.iter().enumerate() {
                let at = |m: i64| Some(from_minutes(base + m));
                records.push(RawStopRecord {
                    service_day: day,
                    train_number: t.train_number.clone(),
                    trip_id: trip_ids[ti].clone(),
                    station_code: net.codes[pattern.stations[k]].clone(),
                    stop_index: k as u32,
                    train_type: pattern.train_type.to_string(),
                    scheduled_arrival: arr.and_then(at),
                    actual_arrival: arr.and_then(|a| at(a + arr_delay[ti][k])),
                    scheduled_departure: dep.and_then(at),
                    actual_departure: dep.and_then(|dp| at(dp + dep_delay[ti][k])),
                    platform_scheduled: Some(pattern.platform.to_string()),
                    platform_actual: Some(pattern.platform.to_string()),
                    cancelled_arrival: false,
                    cancelled_departure: false,
                });
            }
        }
    }

    Ok(SyntheticDataset {
        records,
        ground_truth: truth,
        holidays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::to_minutes;

    fn delay(r: &RawStopRecord) -> (Option<i64>, Option<i64>) {
        let d = |s: Option<chrono::NaiveDateTime>, a: Option<chrono::NaiveDateTime>| {
            Some(to_minutes(a?) - to_minutes(s?))
        };
        (
            d(r.scheduled_arrival, r.actual_arrival),
            d(r.scheduled_departure, r.actual_departure),
        )
    }

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            station_count: 8,
            trips_per_day: 12,
            day_count: 2,
            ..Default::default()
        }
    }

    #[test]
    fn single_injection_hand_trace() {
        // 10 minutes injected at the origin departure, three further stops,
        // recovery 1 per dwell: two intermediate dwells before the terminus.
        let mut dep = departure_delay(None, 1, 10);
        let mut arrivals = Vec::new();
        for stop in 1..=3 {
            let arr = dep;
            arrivals.push(arr);
            if stop < 3 {
                dep = departure_delay(Some(arr), 1, 0);
            }
        }
        assert_eq!(arrivals, vec![10, 9, 8]);
        assert_eq!(*arrivals.last().unwrap(), 10 - 2);
        assert_eq!(departure_delay(Some(0), 1, 0), 0);
    }

    #[test]
    fn zero_rate_means_on_time() {
        let cfg = SyntheticConfig {
            primary_delay_rate: 0.0,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.ground_truth.primary_delays.is_empty());
        assert!(ds.ground_truth.propagation_events.is_empty());
        for r in &ds.records {
            assert_eq!(r.scheduled_arrival, r.actual_arrival);
            assert_eq!(r.scheduled_departure, r.actual_departure);
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn no_headway_fraction_means_no_propagation() {
        let cfg = SyntheticConfig {
            headway_propagation_fraction: 0.0,
            primary_delay_rate: 0.3,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        assert!(ds.ground_truth.propagation_events.is_empty());
        assert!(!ds.ground_truth.primary_delays.is_empty());
    }

    /// Replays every trip with the stated rule: departure delay is the arrival
    /// delay minus recovery (floored) plus any primary injection, arrival delay
    /// is the previous departure delay plus any logged headway transfer.
    #[test]
    fn realized_times_follow_logged_rule() {
        let cfg = SyntheticConfig {
            primary_delay_rate: 0.2,
            ..small()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut by_trip: HashMap<&str, Vec<&RawStopRecord>> = HashMap::new();
        for r in &ds.records {
            by_trip.entry(&r.trip_id).or_default().push(r);
        }
        let primary: HashMap<(&str, u32), i64> = ds
            .ground_truth
            .primary_delays
            .iter()
            .map(|p| ((p.trip_id.as_str(), p.stop_index), p.minutes as i64))
            .collect();
        let transfer: HashMap<(&str, &str), i64> = ds
            .ground_truth
            .propagation_events
            .iter()
            .map(|p| ((p.to_trip.as_str(), p.station.as_str()), p.minutes as i64))
            .collect();
        for (trip, stops) in by_trip {
            let mut prev_dep = 0;
            for s in stops {
                let (arr, dep) = delay(s);
                let mut arr_delay = 0;
                if let Some(a) = arr {
                    let add = transfer
                        .get(&(trip, s.station_code.as_str()))
                        .copied()
                        .unwrap_or(0);
                    assert_eq!(a, prev_dep + add);
                    arr_delay = a;
                }
                if let Some(d) = dep {
                    let carried = if arr.is_some() {
                        (arr_delay - cfg.dwell_recovery as i64).max(0)
                    } else {
                        0
                    };
                    let p = primary.get(&(trip, s.stop_index)).copied().unwrap_or(0);
                    assert_eq!(d, carried + p);
                    prev_dep = d;
                }
            }
        }
    }
}
