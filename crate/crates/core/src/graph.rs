//! Per-day event graphs, rollout state, and sequentially consistent subgraphs.
//!
//! Every stop contributes an arrival and a departure node (no arrival at the
//! origin, no departure at the terminus). Run edges join departure(i-1) to
//! arrival(i), Dwell edges arrival(i) to departure(i), and Headway edges join
//! the leader's arrival to the follower's arrival at a shared station.
//!
//! An event is *realized* at a cutoff when its actual time is strictly before
//! the cutoff. Views extracted for a cutoff read actual times of realized
//! events only; everything else comes from the timetable or the rollout state.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    cyclical_encode, headway_eligible, headway_from_delays, peak_flag, Affine, DayHistory,
    FeatureConfig, FeatureSlot, NodeFeatureVector, Preprocessor, ScheduledStop, TripSchedule,
    CATEGORICAL_COUNT, DENSE_WIDTH, EDGE_DURATION,
};
use crate::ingest::CleanTrip;
use crate::time::{
    format_timestamp, from_minutes, minute_of_day_from_minutes, parse_timestamp, to_minutes,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    Arrival,
    Departure,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Arrival => "arrival",
            EventKind::Departure => "departure",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "arrival" => Some(EventKind::Arrival),
            "departure" => Some(EventKind::Departure),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    Run,
    Dwell,
    Headway,
}

impl EdgeType {
    pub const ALL: [EdgeType; 3] = [EdgeType::Run, EdgeType::Dwell, EdgeType::Headway];

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::Run => "Run",
            EdgeType::Dwell => "Dwell",
            EdgeType::Headway => "Headway",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Run" => Some(EdgeType::Run),
            "Dwell" => Some(EdgeType::Dwell),
            "Headway" => Some(EdgeType::Headway),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventNode {
    pub id: usize,
    pub kind: EventKind,
    /// Index into [`EventGraph::schedule`].
    pub trip: usize,
    pub stop_index: u32,
    pub station: String,
    pub scheduled: i64,
    pub actual: Option<i64>,
    pub features: NodeFeatureVector,
    pub target_delay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub duration_actual: Option<f64>,
    pub duration_scheduled: f64,
}

/// Scaled node inputs, filled in by [`EventGraph::encode`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInputs {
    pub dense: Vec<[f64; DENSE_WIDTH]>,
    pub cats: Vec<[usize; CATEGORICAL_COUNT]>,
    pub lag2: Affine,
    pub duration: Affine,
}

#[derive(Debug, Clone)]
pub struct EventGraph {
    pub service_day: NaiveDate,
    pub nodes: Vec<EventNode>,
    pub edges: Vec<TypedEdge>,
    pub schedule: Vec<TripSchedule>,
    pub in_edges: Vec<Vec<usize>>,
    pub out_edges: Vec<Vec<usize>>,
    /// Departure node two stops back on the same trip.
    pub lag2_source: Vec<Option<usize>>,
    pub encoded: Option<EncodedInputs>,
}

fn delay_of(scheduled: i64, actual: Option<i64>) -> f64 {
    actual.map_or(0.0, |a| (a - scheduled).max(0) as f64)
}

impl EventGraph {
    /// Assemble the event graph of one service day.
    pub fn build(trips: &[CleanTrip], cfg: &FeatureConfig) -> Result<EventGraph> {
        let Some(first) = trips.first() else {
            return Err(Error::Graph("no trips for service day".into()));
        };
        let service_day = first.service_day;
        if trips.iter().any(|t| t.service_day != service_day) {
            return Err(Error::Graph("trips span several service days".into()));
        }
        let mut order: Vec<&CleanTrip> = trips.iter().collect();
        order.sort_by(|a, b| a.trip_id.cmp(&b.trip_id));
        if order.windows(2).any(|w| w[0].trip_id == w[1].trip_id) {
            return Err(Error::Graph("duplicate trip id".into()));
        }

        let schedule: Vec<TripSchedule> = order
            .iter()
            .map(|t| TripSchedule {
                trip_id: t.trip_id.clone(),
                train_type: t.train_type.clone(),
                stops: t
                    .stops
                    .iter()
                    .map(|s| ScheduledStop {
                        station: s.record.station_code.clone(),
                        platform: s.record.platform_scheduled.clone(),
                        arrival: s.record.scheduled_arrival.map(to_minutes),
                        departure: s.record.scheduled_departure.map(to_minutes),
                    })
                    .collect(),
            })
            .collect();
        let history = DayHistory::from_schedules(&schedule);
        let weekday = service_day.weekday().num_days_from_monday();
        let is_holiday = cfg.holidays.contains(&service_day);

        let mut nodes = Vec::new();
        let mut index: HashMap<(usize, u32, EventKind), usize> = HashMap::new();
        for (ti, trip) in order.iter().enumerate() {
            let last = trip.stops.len() as u32 - 1;
            for stop in &trip.stops {
                let r = &stop.record;
                let events = [
                    (EventKind::Arrival, r.scheduled_arrival, r.actual_arrival),
                    (
                        EventKind::Departure,
                        r.scheduled_departure,
                        r.actual_departure,
                    ),
                ];
                for (kind, sched, actual) in events {
                    let Some(sched) = sched.map(to_minutes) else {
                        continue;
                    };
                    let actual = actual.map(to_minutes);
                    let tod = minute_of_day_from_minutes(sched);
                    let (sin, cos) = cyclical_encode(tod)?;
                    let platform = r.platform_scheduled.as_deref();
                    let pc = history.platform_congestion(
                        &r.station_code,
                        platform,
                        sched,
                        ti,
                        cfg.congestion_cap_minutes,
                    );
                    let features = NodeFeatureVector {
                        arrival_tod_sin: sin,
                        arrival_tod_cos: cos,
                        day_of_week: weekday,
                        is_weekend: weekday >= 5,
                        is_holiday,
                        is_peak: peak_flag(tod),
                        is_origin_stop: r.stop_index == 0,
                        is_terminal_stop: r.stop_index == last,
                        platform_known: pc.platform_known,
                        prev_stop_cancelled: stop.prev_stop_cancelled,
                        month: service_day.month(),
                        number_of_stops_left: last - r.stop_index,
                        num_prev_cancelled: stop.num_prev_cancelled,
                        lag2_delay: 0.0,
                        train_count_last_60min: pc.train_count_last_60min,
                        minutes_since_last_train_clipped: pc.minutes_since_last_train,
                        inbound_trains_near_arrival: history.station_congestion(
                            &r.station_code,
                            sched,
                            ti,
                        ),
                        train_type: trip.train_type.clone(),
                        stop_name: r.station_code.clone(),
                        platform_scheduled: r.platform_scheduled.clone(),
                    };
                    let id = nodes.len();
                    index.insert((ti, r.stop_index, kind), id);
                    nodes.push(EventNode {
                        id,
                        kind,
                        trip: ti,
                        stop_index: r.stop_index,
                        station: r.station_code.clone(),
                        scheduled: sched,
                        actual,
                        features,
                        target_delay: delay_of(sched, actual),
                    });
                }
            }
        }

        let mut edges = Vec::new();
        let duration = |src: &EventNode, dst: &EventNode| TypedEdge {
            src: src.id,
            dst: dst.id,
            edge_type: EdgeType::Run,
            duration_actual: match (src.actual, dst.actual) {
                (Some(a), Some(b)) => Some((b - a) as f64),
                _ => None,
            },
            duration_scheduled: (dst.scheduled - src.scheduled) as f64,
        };
        for (ti, trip) in order.iter().enumerate() {
            for stop in &trip.stops {
                let i = stop.record.stop_index;
                let arr = index.get(&(ti, i, EventKind::Arrival));
                let dep = index.get(&(ti, i, EventKind::Departure));
                if i > 0 {
                    let prev = index.get(&(ti, i - 1, EventKind::Departure));
                    match (prev, arr) {
                        (Some(&p), Some(&a)) => edges.push(duration(&nodes[p], &nodes[a])),
                        _ => {
                            return Err(Error::Graph(format!(
                                "trip {} stop {i}: missing run endpoint",
                                trip.trip_id
                            )))
                        }
                    }
                }
                if let (Some(&a), Some(&d)) = (arr, dep) {
                    edges.push(TypedEdge {
                        edge_type: EdgeType::Dwell,
                        ..duration(&nodes[a], &nodes[d])
                    });
                }
            }
        }

        let mut arrivals_by_station: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for n in &nodes {
            if n.kind == EventKind::Arrival {
                arrivals_by_station
                    .entry(n.station.as_str())
                    .or_default()
                    .push(n.id);
            }
        }
        let mut headway = Vec::new();
        for (station, ids) in &arrivals_by_station {
            for (x, &a) in ids.iter().enumerate() {
                for &b in &ids[x + 1..] {
                    let (na, nb) = (&nodes[a], &nodes[b]);
                    if !headway_eligible(&schedule[na.trip], &schedule[nb.trip], station) {
                        continue;
                    }
                    let key = |n: &EventNode| (n.scheduled, schedule[n.trip].trip_id.clone());
                    let (leader, follower) = if key(na) <= key(nb) {
                        (na, nb)
                    } else {
                        (nb, na)
                    };
                    headway.push(TypedEdge {
                        edge_type: EdgeType::Headway,
                        ..duration(leader, follower)
                    });
                }
            }
        }
        headway.sort_by_key(|e| (e.dst, e.src));
        edges.extend(headway);

        let mut graph = EventGraph {
            service_day,
            nodes,
            edges,
            schedule,
            in_edges: Vec::new(),
            out_edges: Vec::new(),
            lag2_source: Vec::new(),
            encoded: None,
        };
        graph.index()?;
        for v in 0..graph.nodes.len() {
            if let Some(src) = graph.lag2_source[v] {
                graph.nodes[v].features.lag2_delay = graph.nodes[src].target_delay;
            }
        }
        Ok(graph)
    }

    /// Rebuild adjacency and lag lookups; validates edge endpoints.
    fn index(&mut self) -> Result<()> {
        let n = self.nodes.len();
        self.in_edges = vec![Vec::new(); n];
        self.out_edges = vec![Vec::new(); n];
        for (e, edge) in self.edges.iter().enumerate() {
            if edge.src >= n || edge.dst >= n {
                return Err(Error::Graph(format!(
                    "edge {e} references missing node ({} -> {})",
                    edge.src, edge.dst
                )));
            }
            self.in_edges[edge.dst].push(e);
            self.out_edges[edge.src].push(e);
        }
        let deps: HashMap<(usize, u32), usize> = self
            .nodes
            .iter()
            .filter(|n| n.kind == EventKind::Departure)
            .map(|n| ((n.trip, n.stop_index), n.id))
            .collect();
        self.lag2_source = self
            .nodes
            .iter()
            .map(|n| {
                n.stop_index
                    .checked_sub(2)
                    .and_then(|s| deps.get(&(n.trip, s)).copied())
            })
            .collect();
        Ok(())
    }

    /// Fill the scaled node inputs from a fitted preprocessor.
    pub fn encode(&mut self, pre: &Preprocessor) {
        let (dense, cats) = self.nodes.iter().map(|n| pre.encode(&n.features)).unzip();
        self.encoded = Some(EncodedInputs {
            dense,
            cats,
            lag2: pre.node_scaler.affine("lag2_delay"),
            duration: pre.edge_scaler.affine(EDGE_DURATION),
        });
    }

    pub fn trip_id(&self, node: usize) -> &str {
        &self.schedule[self.nodes[node].trip].trip_id
    }

    pub fn train_type(&self, node: usize) -> &str {
        &self.schedule[self.nodes[node].trip].train_type
    }

    pub fn edge_count(&self, t: EdgeType) -> usize {
        self.edges.iter().filter(|e| e.edge_type == t).count()
    }

    /// Kahn topological order; `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let mut indeg: Vec<usize> = self.in_edges.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..self.nodes.len()).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &e in &self.out_edges[v] {
                let w = self.edges[e].dst;
                indeg[w] -= 1;
                if indeg[w] == 0 {
                    queue.push_back(w);
                }
            }
        }
        (order.len() == self.nodes.len()).then_some(order)
    }

    /// Replace actual times (used by leakage tests); keeps targets and realized
    /// durations consistent with the new times.
    pub fn set_actual(&mut self, node: usize, actual: Option<i64>) {
        self.nodes[node].actual = actual;
        self.nodes[node].target_delay = delay_of(self.nodes[node].scheduled, actual);
        let touched: Vec<usize> = self.in_edges[node]
            .iter()
            .chain(&self.out_edges[node])
            .copied()
            .collect();
        for e in touched {
            let (s, d) = (self.edges[e].src, self.edges[e].dst);
            self.edges[e].duration_actual = match (self.nodes[s].actual, self.nodes[d].actual) {
                (Some(a), Some(b)) => Some((b - a) as f64),
                _ => None,
            };
        }
    }

    fn encoded(&self) -> Result<&EncodedInputs> {
        self.encoded
            .as_ref()
            .ok_or_else(|| Error::Graph("graph inputs not encoded; call encode first".into()))
    }
}

// ---------------------------------------------------------------------------
// Serialization

const NODE_COLUMNS: &str = "node_id,kind,trip_id,stop_index,station_code,scheduled_time,actual_time,target_delay,arrival_tod_sin,arrival_tod_cos,day_of_week,is_weekend,is_holiday,is_peak,is_origin_stop,is_terminal_stop,platform_known,prev_stop_cancelled,month,number_of_stops_left,num_prev_cancelled,lag2_delay,train_count_last_60min,minutes_since_last_train_clipped,inbound_trains_near_arrival,train_type,stop_name,platform_scheduled";
const EDGE_COLUMNS: &str = "src,dst,type,duration_actual,duration_scheduled";

#[derive(Serialize, Deserialize)]
struct ScheduleFile {
    service_day: NaiveDate,
    trips: Vec<TripSchedule>,
}

impl EventGraph {
    /// Write `nodes.csv`, `edges.csv` and `schedule.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| Error::io(p.clone(), e)
        };

        let path = dir.join("nodes.csv");
        let mut out = String::new();
        out.push_str(NODE_COLUMNS);
        out.push('\n');
        for n in &self.nodes {
            let f = &n.features;
            let fields: Vec<String> = vec![
                n.id.to_string(),
                n.kind.as_str().into(),
                self.schedule[n.trip].trip_id.clone(),
                n.stop_index.to_string(),
                n.station.clone(),
                format_timestamp(from_minutes(n.scheduled)),
                n.actual
                    .map(|a| format_timestamp(from_minutes(a)))
                    .unwrap_or_default(),
                n.target_delay.to_string(),
                f.arrival_tod_sin.to_string(),
                f.arrival_tod_cos.to_string(),
                f.day_of_week.to_string(),
                f.is_weekend.to_string(),
                f.is_holiday.to_string(),
                f.is_peak.to_string(),
                f.is_origin_stop.to_string(),
                f.is_terminal_stop.to_string(),
                f.platform_known.to_string(),
                f.prev_stop_cancelled.to_string(),
                f.month.to_string(),
                f.number_of_stops_left.to_string(),
                f.num_prev_cancelled.to_string(),
                f.lag2_delay.to_string(),
                f.train_count_last_60min.to_string(),
                f.minutes_since_last_train_clipped.to_string(),
                f.inbound_trains_near_arrival.to_string(),
                f.train_type.clone(),
                f.stop_name.clone(),
                f.platform_scheduled.clone().unwrap_or_default(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        std::fs::write(&path, out).map_err(io(&path))?;

        let path = dir.join("edges.csv");
        let mut out = String::new();
        out.push_str(EDGE_COLUMNS);
        out.push('\n');
        for e in &self.edges {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.src,
                e.dst,
                e.edge_type,
                e.duration_actual.map(|d| d.to_string()).unwrap_or_default(),
                e.duration_scheduled
            ));
        }
        std::fs::write(&path, out).map_err(io(&path))?;

        let path = dir.join("schedule.json");
        let file = std::fs::File::create(&path).map_err(io(&path))?;
        let mut w = std::io::BufWriter::new(file);
        serde_json::to_writer_pretty(
            &mut w,
            &ScheduleFile {
                service_day: self.service_day,
                trips: self.schedule.clone(),
            },
        )?;
        w.write_all(b"\n").map_err(io(&path))?;
        Ok(())
    }

    /// Read a graph written by [`EventGraph::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<EventGraph> {
        let path = dir.join("schedule.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sched: ScheduleFile = serde_json::from_str(&text)?;
        let trip_index: HashMap<&str, usize> = sched
            .trips
            .iter()
            .enumerate()
            .map(|(i, t)| (t.trip_id.as_str(), i))
            .collect();

        let path = dir.join("nodes.csv");
        let mut rdr =
            csv::Reader::from_path(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let mut nodes = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |m: &str| Error::MalformedRow {
                row: i + 2,
                message: format!("nodes.csv: {m}"),
            };
            let get = |c: usize| row.get(c).ok_or_else(|| bad("short row"));
            let num = |c: usize| -> Result<f64> { get(c)?.parse().map_err(|_| bad("bad number")) };
            let int = |c: usize| -> Result<u32> { get(c)?.parse().map_err(|_| bad("bad integer")) };
            let flag = |c: usize| -> Result<bool> { Ok(get(c)? == "true") };
            let time = |c: usize| -> Result<Option<i64>> {
                let s = get(c)?;
                if s.is_empty() {
                    return Ok(None);
                }
                parse_timestamp(s)
                    .map(|t| Some(to_minutes(t)))
                    .ok_or_else(|| bad("bad timestamp"))
            };
            let trip = *trip_index.get(get(2)?).ok_or_else(|| bad("unknown trip"))?;
            let platform = get(27)?;
            nodes.push(EventNode {
                id: get(0)?.parse().map_err(|_| bad("bad id"))?,
                kind: EventKind::parse(get(1)?).ok_or_else(|| bad("bad kind"))?,
                trip,
                stop_index: int(3)?,
                station: get(4)?.to_string(),
                scheduled: time(5)?.ok_or_else(|| bad("missing scheduled time"))?,
                actual: time(6)?,
                target_delay: num(7)?,
                features: NodeFeatureVector {
                    arrival_tod_sin: num(8)?,
                    arrival_tod_cos: num(9)?,
                    day_of_week: int(10)?,
                    is_weekend: flag(11)?,
                    is_holiday: flag(12)?,
                    is_peak: flag(13)?,
                    is_origin_stop: flag(14)?,
                    is_terminal_stop: flag(15)?,
                    platform_known: flag(16)?,
                    prev_stop_cancelled: flag(17)?,
                    month: int(18)?,
                    number_of_stops_left: int(19)?,
                    num_prev_cancelled: int(20)?,
                    lag2_delay: num(21)?,
                    train_count_last_60min: int(22)?,
                    minutes_since_last_train_clipped: num(23)?,
                    inbound_trains_near_arrival: int(24)?,
                    train_type: get(25)?.to_string(),
                    stop_name: get(26)?.to_string(),
                    platform_scheduled: (!platform.is_empty()).then(|| platform.to_string()),
                },
            });
        }

        let path = dir.join("edges.csv");
        let mut rdr =
            csv::Reader::from_path(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        let mut edges = Vec::new();
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = |m: &str| Error::MalformedRow {
                row: i + 2,
                message: format!("edges.csv: {m}"),
            };
            let get = |c: usize| row.get(c).ok_or_else(|| bad("short row"));
            let actual = get(3)?;
            edges.push(TypedEdge {
                src: get(0)?.parse().map_err(|_| bad("bad src"))?,
                dst: get(1)?.parse().map_err(|_| bad("bad dst"))?,
                edge_type: EdgeType::parse(get(2)?).ok_or_else(|| bad("bad type"))?,
                duration_actual: if actual.is_empty() {
                    None
                } else {
                    Some(actual.parse().map_err(|_| bad("bad duration"))?)
                },
                duration_scheduled: get(4)?.parse().map_err(|_| bad("bad duration"))?,
            });
        }

        let mut graph = EventGraph {
            service_day: sched.service_day,
            nodes,
            edges,
            schedule: sched.trips,
            in_edges: Vec::new(),
            out_edges: Vec::new(),
            lag2_source: Vec::new(),
            encoded: None,
        };
        if graph.nodes.iter().enumerate().any(|(i, n)| n.id != i) {
            return Err(Error::Graph("node ids are not dense and ordered".into()));
        }
        graph.index()?;
        Ok(graph)
    }
}

// ---------------------------------------------------------------------------
// Rollout state

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DelaySource {
    ScheduledZero,
    Realized,
    Predicted,
}

/// Mutable simulation state of one rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    pub cutoff: i64,
    pub source: Vec<DelaySource>,
    pub delay: Vec<f64>,
    /// Edge duration exposed to the model.
    pub edge_duration: Vec<f64>,
    pub step: usize,
}

impl RolloutState {
    /// Fresh state seeded only with events realized before `cutoff`.
    pub fn new(graph: &EventGraph, cutoff: i64) -> Self {
        let mut source = Vec::with_capacity(graph.nodes.len());
        let mut delay = Vec::with_capacity(graph.nodes.len());
        for n in &graph.nodes {
            if n.actual.is_some_and(|a| a < cutoff) {
                source.push(DelaySource::Realized);
                delay.push(n.target_delay);
            } else {
                source.push(DelaySource::ScheduledZero);
                delay.push(0.0);
            }
        }
        let mut state = RolloutState {
            cutoff,
            source,
            delay,
            edge_duration: vec![0.0; graph.edges.len()],
            step: 0,
        };
        for e in 0..graph.edges.len() {
            state.edge_duration[e] = state.current_duration(graph, e);
        }
        state
    }

    pub fn is_realized(&self, node: usize) -> bool {
        self.source[node] == DelaySource::Realized
    }

    fn current_duration(&self, graph: &EventGraph, e: usize) -> f64 {
        let edge = &graph.edges[e];
        if self.is_realized(edge.src) && self.is_realized(edge.dst) {
            return edge
                .duration_actual
                .expect("realized endpoints have actual times");
        }
        match edge.edge_type {
            EdgeType::Headway => headway_from_delays(
                edge.duration_scheduled,
                self.delay[edge.src],
                self.delay[edge.dst],
            ),
            EdgeType::Run | EdgeType::Dwell => edge.duration_scheduled,
        }
    }

    /// Write step predictions (minutes) and refresh dependent headway
    /// durations. Realized entries are never overwritten.
    pub fn update(&mut self, graph: &EventGraph, predictions: &[(usize, f64)]) -> Result<()> {
        for &(v, _) in predictions {
            if self.is_realized(v) {
                return Err(Error::State(format!(
                    "node {v} is realized and cannot be overwritten"
                )));
            }
        }
        let mut touched = BTreeSet::new();
        for &(v, value) in predictions {
            self.source[v] = DelaySource::Predicted;
            self.delay[v] = value;
            for &e in graph.in_edges[v].iter().chain(&graph.out_edges[v]) {
                if graph.edges[e].edge_type == EdgeType::Headway {
                    touched.insert(e);
                }
            }
        }
        for e in touched {
            self.edge_duration[e] = self.current_duration(graph, e);
        }
        self.step += 1;
        Ok(())
    }

    /// Delay estimate two stops back, as seen by the model.
    pub fn lag2(&self, graph: &EventGraph, node: usize) -> f64 {
        graph.lag2_source[node].map_or(0.0, |s| self.delay[s])
    }
}

// ---------------------------------------------------------------------------
// Subgraph extraction

/// Shuffles one node feature across the nodes of a day.
#[derive(Debug, Clone)]
pub struct FeaturePermutation {
    pub slot: FeatureSlot,
    /// `perm[v]` is the node whose value node `v` receives.
    pub perm: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub parent: usize,
    pub duration: f64,
    pub scaled_duration: f64,
}

/// Minimal subgraph around a batch of anchors, with inputs as visible at the
/// cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphView {
    /// Parent node ids, ascending.
    pub nodes: Vec<usize>,
    /// Local indices of the anchors.
    pub anchors: Vec<usize>,
    pub edges: Vec<ViewEdge>,
    pub dense: Array2<f64>,
    pub cats: Vec<[usize; CATEGORICAL_COUNT]>,
    pub cutoff: i64,
}

/// Extract anchors plus their in-neighborhood up to `depth` hops.
pub fn extract_consistent_subgraph(
    graph: &EventGraph,
    anchors: &[usize],
    state: &RolloutState,
    depth: usize,
) -> Result<SubgraphView> {
    extract_with(graph, anchors, state, depth, None)
}

pub fn extract_with(
    graph: &EventGraph,
    anchors: &[usize],
    state: &RolloutState,
    depth: usize,
    permutation: Option<&FeaturePermutation>,
) -> Result<SubgraphView> {
    let enc = graph.encoded()?;
    let n = graph.nodes.len();
    if let Some(&bad) = anchors.iter().find(|&&a| a >= n) {
        return Err(Error::Graph(format!("anchor {bad} not in graph")));
    }
    let mut seen = vec![false; n];
    let mut frontier: Vec<usize> = Vec::new();
    for &a in anchors {
        if !seen[a] {
            seen[a] = true;
            frontier.push(a);
        }
    }
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            for &e in &graph.in_edges[v] {
                let u = graph.edges[e].src;
                if !seen[u] {
                    seen[u] = true;
                    next.push(u);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    let nodes: Vec<usize> = (0..n).filter(|&v| seen[v]).collect();
    let mut local = vec![usize::MAX; n];
    for (i, &v) in nodes.iter().enumerate() {
        local[v] = i;
    }

    let mut edges = Vec::new();
    for &v in &nodes {
        for &e in &graph.in_edges[v] {
            let edge = &graph.edges[e];
            if !seen[edge.src] {
                continue;
            }
            let d = state.edge_duration[e];
            edges.push(ViewEdge {
                src: local[edge.src],
                dst: local[v],
                edge_type: edge.edge_type,
                parent: e,
                duration: d,
                scaled_duration: enc.duration.apply(d),
            });
        }
    }

    let mut dense = Array2::zeros((nodes.len(), DENSE_WIDTH));
    let mut cats = Vec::with_capacity(nodes.len());
    for (i, &v) in nodes.iter().enumerate() {
        let mut row = enc.dense[v];
        let mut cat = enc.cats[v];
        row[0] = enc.lag2.apply(state.lag2(graph, v));
        if let Some(p) = permutation {
            let w = p.perm[v];
            match p.slot {
                FeatureSlot::Dense(0) => row[0] = enc.lag2.apply(state.lag2(graph, w)),
                FeatureSlot::Dense(c) => row[c] = enc.dense[w][c],
                FeatureSlot::Categorical(c) => cat[c] = enc.cats[w][c],
            }
        }
        dense.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        cats.push(cat);
    }

    let anchors = anchors.iter().map(|&a| local[a]).collect();
    Ok(SubgraphView {
        nodes,
        anchors,
        edges,
        dense,
        cats,
        cutoff: state.cutoff,
    })
}

// ---------------------------------------------------------------------------
// Anchor batching

/// One k-step rollout. Step s holds the events scheduled in
/// `[tile_start + s*w, tile_start + (s+1)*w)`; the forecast origin (also the
/// realization cutoff) is the scheduled time of the earliest anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutPlan {
    pub tile_start: i64,
    pub origin: i64,
    pub steps: Vec<Vec<usize>>,
}

impl RolloutPlan {
    pub fn anchors(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .flat_map(|(s, a)| a.iter().map(move |&v| (s, v)))
    }
}

/// Tile the day into consecutive rollouts of `k` slices of `slice_minutes`.
/// Events already realized at a rollout's origin are not anchors.
pub fn plan_rollouts(graph: &EventGraph, k: usize, slice_minutes: i64) -> Vec<RolloutPlan> {
    let Some(first) = graph.nodes.iter().map(|n| n.scheduled).min() else {
        return Vec::new();
    };
    let last = graph
        .nodes
        .iter()
        .map(|n| n.scheduled)
        .max()
        .expect("non-empty");
    let span = k as i64 * slice_minutes;
    let mut tile_start = first.div_euclid(slice_minutes) * slice_minutes;
    let mut plans = Vec::new();
    while tile_start <= last {
        let in_tile: Vec<&EventNode> = graph
            .nodes
            .iter()
            .filter(|n| (0..span).contains(&(n.scheduled - tile_start)))
            .collect();
        if let Some(origin) = in_tile.iter().map(|n| n.scheduled).min() {
            let mut steps = vec![Vec::new(); k];
            for n in in_tile {
                if n.actual.is_some_and(|a| a < origin) {
                    continue;
                }
                steps[((n.scheduled - tile_start) / slice_minutes) as usize].push(n.id);
            }
            plans.push(RolloutPlan {
                tile_start,
                origin,
                steps,
            });
        }
        tile_start += span;
    }
    plans
}
