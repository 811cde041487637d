//! Local wall-clock helpers over UTC epoch seconds.
//!
//! The study area runs on a single fixed offset (EDT, UTC-4) for the whole
//! data range, so a fixed-offset clock is all the pipeline needs.

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};

pub const SECONDS_PER_HOUR: i64 = 3_600;
pub const SECONDS_PER_DAY: i64 = 86_400;

/// Days between 0001-01-01 (CE day 1) and 1970-01-01.
const UNIX_EPOCH_CE_DAYS: i64 = 719_163;

/// Half-open interval `[start, end)` in UTC epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
}

impl Interval {
    pub fn new(start: i64, end: i64) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, t: i64) -> bool {
        self.start <= t && t < self.end
    }

    pub fn len(&self) -> i64 {
        (self.end - self.start).max(0)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Length of the intersection with the closed span `[a, b]`.
    pub fn overlap(&self, a: i64, b: i64) -> i64 {
        (self.end.min(b) - self.start.max(a)).max(0)
    }

    pub fn clip(&self, other: &Interval) -> Interval {
        Interval::new(self.start.max(other.start), self.end.min(other.end))
    }
}

/// A fixed UTC offset clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalClock {
    pub utc_offset_s: i64,
}

impl Default for LocalClock {
    fn default() -> Self {
        Self::eastern_daylight()
    }
}

impl LocalClock {
    pub fn new(utc_offset_s: i64) -> Self {
        Self { utc_offset_s }
    }

    pub fn eastern_daylight() -> Self {
        Self::new(-4 * SECONDS_PER_HOUR)
    }

    /// Local calendar day index (days since 1970-01-01 local).
    pub fn day_index(&self, t: i64) -> i64 {
        (t + self.utc_offset_s).div_euclid(SECONDS_PER_DAY)
    }

    pub fn local_date(&self, t: i64) -> NaiveDate {
        date_of_day_index(self.day_index(t))
    }

    /// Local hour of day in `0..24`.
    pub fn hour_of_day(&self, t: i64) -> u32 {
        ((t + self.utc_offset_s).rem_euclid(SECONDS_PER_DAY) / SECONDS_PER_HOUR) as u32
    }

    /// UTC instant of local midnight starting `day`.
    pub fn day_start(&self, day: i64) -> i64 {
        day * SECONDS_PER_DAY - self.utc_offset_s
    }

    pub fn date_start(&self, date: NaiveDate) -> i64 {
        self.day_start(day_index_of_date(date))
    }

    /// UTC instant of a local wall-clock time.
    pub fn local_to_utc(&self, local: NaiveDateTime) -> i64 {
        local.and_utc().timestamp() - self.utc_offset_s
    }

    /// Start of the local hour containing `t`.
    pub fn floor_hour(&self, t: i64) -> i64 {
        let local = t + self.utc_offset_s;
        local.div_euclid(SECONDS_PER_HOUR) * SECONDS_PER_HOUR - self.utc_offset_s
    }

    /// Day of week for a local day index, 0 = Sunday .. 6 = Saturday.
    pub fn weekday(day: i64) -> u32 {
        (day + 4).rem_euclid(7) as u32
    }

    /// The night that starts on local `day`: `[day + start_hour, day + 1 + end_hour)`.
    /// When `end_hour > start_hour` the night is taken to end on the same day.
    pub fn night(&self, day: i64, start_hour: u32, end_hour: u32) -> Interval {
        let base = self.day_start(day);
        let start = base + start_hour as i64 * SECONDS_PER_HOUR;
        let end = if end_hour <= start_hour {
            base + SECONDS_PER_DAY + end_hour as i64 * SECONDS_PER_HOUR
        } else {
            base + end_hour as i64 * SECONDS_PER_HOUR
        };
        Interval::new(start, end)
    }
}

pub fn day_index_of_date(date: NaiveDate) -> i64 {
    use chrono::Datelike;
    date.num_days_from_ce() as i64 - UNIX_EPOCH_CE_DAYS
}

pub fn date_of_day_index(day: i64) -> NaiveDate {
    NaiveDate::from_num_days_from_ce_opt((day + UNIX_EPOCH_CE_DAYS) as i32).expect("day index within chrono range")
}

pub fn format_utc(t: i64) -> String {
    DateTime::<Utc>::from_timestamp(t, 0)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%SZ").to_string())
        .unwrap_or_else(|| t.to_string())
}
