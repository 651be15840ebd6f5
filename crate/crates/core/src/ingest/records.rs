use std::io::{Read, Write};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::{format_timestamp, parse_date, parse_timestamp};

pub const CSV_HEADER: [&str; 14] = [
    "service_day",
    "train_number",
    "trip_id",
    "station_code",
    "stop_index",
    "train_type",
    "scheduled_arrival",
    "actual_arrival",
    "scheduled_departure",
    "actual_departure",
    "platform_scheduled",
    "platform_actual",
    "cancelled_arrival",
    "cancelled_departure",
];

/// One scheduled stop of one train service with its realized times.
///
/// Arrival fields are absent at the origin, departure fields at the terminus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStopRecord {
    pub service_day: NaiveDate,
    pub train_number: String,
    pub trip_id: String,
    pub station_code: String,
    pub stop_index: u32,
    pub train_type: String,
    pub scheduled_arrival: Option<NaiveDateTime>,
    pub actual_arrival: Option<NaiveDateTime>,
    pub scheduled_departure: Option<NaiveDateTime>,
    pub actual_departure: Option<NaiveDateTime>,
    pub platform_scheduled: Option<String>,
    pub platform_actual: Option<String>,
    pub cancelled_arrival: bool,
    pub cancelled_departure: bool,
}

pub fn read_records(path: &Path) -> Result<Vec<RawStopRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_records(file)
}

/// Parse the stop-record CSV. The header must name exactly the known columns
/// (in any order); absent values are empty strings.
pub fn parse_records<R: Read>(reader: R) -> Result<Vec<RawStopRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [usize::MAX; CSV_HEADER.len()];
    for (pos, name) in headers.iter().enumerate() {
        match CSV_HEADER.iter().position(|h| *h == name) {
            Some(i) => index[i] = pos,
            None => return Err(Error::UnknownColumn(name.to_string())),
        }
    }
    if let Some(missing) = index.iter().position(|&i| i == usize::MAX) {
        return Err(Error::MissingColumn(CSV_HEADER[missing].to_string()));
    }

    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Row numbers are 1-based and count the header line.
        let row_no = i + 2;
        let row = row.map_err(|e| Error::MalformedRow {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |col: usize| row.get(index[col]).unwrap_or("");
        let bad = |message: String| Error::MalformedRow {
            row: row_no,
            message,
        };
        let opt_time = |col: usize| -> Result<Option<NaiveDateTime>> {
            let s = field(col);
            if s.is_empty() {
                return Ok(None);
            }
            parse_timestamp(s)
                .map(Some)
                .ok_or_else(|| bad(format!("invalid timestamp `{s}` in {}", CSV_HEADER[col])))
        };
        let opt_str = |col: usize| {
            let s = field(col);
            (!s.is_empty()).then(|| s.to_string())
        };
        let boolean = |col: usize| -> Result<bool> {
            match field(col) {
                "true" => Ok(true),
                "false" | "" => Ok(false),
                other => Err(bad(format!(
                    "invalid boolean `{other}` in {}",
                    CSV_HEADER[col]
                ))),
            }
        };

        let service_day = parse_date(field(0))
            .ok_or_else(|| bad(format!("invalid service_day `{}`", field(0))))?;
        let stop_index = field(4)
            .parse::<u32>()
            .map_err(|_| bad(format!("invalid stop_index `{}`", field(4))))?;
        let station_code = field(3).to_string();
        if station_code.is_empty() {
            return Err(bad("empty station_code".into()));
        }
        out.push(RawStopRecord {
            service_day,
            train_number: field(1).to_string(),
            trip_id: field(2).to_string(),
            station_code,
            stop_index,
            train_type: field(5).to_string(),
            scheduled_arrival: opt_time(6)?,
            actual_arrival: opt_time(7)?,
            scheduled_departure: opt_time(8)?,
            actual_departure: opt_time(9)?,
            platform_scheduled: opt_str(10),
            platform_actual: opt_str(11),
            cancelled_arrival: boolean(12)?,
            cancelled_departure: boolean(13)?,
        });
    }
    Ok(out)
}

pub fn write_records<W: Write>(writer: W, records: &[RawStopRecord]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().from_writer(writer);
    wtr.write_record(CSV_HEADER)?;
    let t = |v: &Option<NaiveDateTime>| v.map(format_timestamp).unwrap_or_default();
    for r in records {
        wtr.write_record([
            r.service_day.format("%Y-%m-%d").to_string(),
            r.train_number.clone(),
            r.trip_id.clone(),
            r.station_code.clone(),
            r.stop_index.to_string(),
            r.train_type.clone(),
            t(&r.scheduled_arrival),
            t(&r.actual_arrival),
            t(&r.scheduled_departure),
            t(&r.actual_departure),
            r.platform_scheduled.clone().unwrap_or_default(),
            r.platform_actual.clone().unwrap_or_default(),
            r.cancelled_arrival.to_string(),
            r.cancelled_departure.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
