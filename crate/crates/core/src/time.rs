//! Minute-resolution timestamp helpers.
//!
//! All arithmetic is done on whole minutes since the Unix epoch; timestamps
//! are written as `YYYY-MM-DDTHH:MM`.

use chrono::{NaiveDate, NaiveDateTime, Timelike};

pub const MINUTES_PER_DAY: i64 = 1440;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

/// Minutes since the epoch, truncating any seconds.
pub fn to_minutes(t: NaiveDateTime) -> i64 {
    t.and_utc().timestamp().div_euclid(60)
}

pub fn from_minutes(m: i64) -> NaiveDateTime {
    chrono::DateTime::from_timestamp(m * 60, 0)
        .expect("minute timestamp in range")
        .naive_utc()
}

/// Minutes since local midnight of the timestamp's calendar date.
pub fn minute_of_day(t: NaiveDateTime) -> u32 {
    t.hour() * 60 + t.minute()
}

pub fn minute_of_day_from_minutes(m: i64) -> u32 {
    m.rem_euclid(MINUTES_PER_DAY) as u32
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
        .ok()
        .map(|t| t.with_second(0).expect("zero seconds is valid"))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
}

pub fn midnight_minutes(day: NaiveDate) -> i64 {
    to_minutes(day.and_hms_opt(0, 0, 0).expect("midnight"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minute_roundtrip() {
        let t = parse_timestamp("2022-03-04T10:17").unwrap();
        assert_eq!(from_minutes(to_minutes(t)), t);
        assert_eq!(minute_of_day(t), 617);
        assert_eq!(format_timestamp(t), "2022-03-04T10:17");
    }

    #[test]
    fn seconds_are_truncated() {
        let t = parse_timestamp("2022-03-04T10:17:45").unwrap();
        assert_eq!(format_timestamp(t), "2022-03-04T10:17");
    }
}
