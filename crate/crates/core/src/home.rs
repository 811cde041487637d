//! Proxy home inference on a fixed metric grid.
//!
//! Each user's pre-event pings are binned into grid cells and the time
//! between consecutive pings is credited to the earlier ping's cell (capped,
//! so signal gaps cannot fabricate dwell). A cell that dominates at least
//! `min_nights` nights is the home; otherwise the weekend dwell fallback is
//! tried.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{CleanPing, TrackSet, UserTrack};
use crate::time::{day_index_of_date, Interval, LocalClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GridCell {
    pub ix: i64,
    pub iy: i64,
}

impl GridCell {
    pub fn of(easting: f64, northing: f64, grid_m: f64) -> Self {
        Self {
            ix: (easting / grid_m).floor() as i64,
            iy: (northing / grid_m).floor() as i64,
        }
    }

    pub fn contains(&self, easting: f64, northing: f64, grid_m: f64) -> bool {
        Self::of(easting, northing, grid_m) == *self
    }

    pub fn center(&self, grid_m: f64) -> (f64, f64) {
        ((self.ix as f64 + 0.5) * grid_m, (self.iy as f64 + 0.5) * grid_m)
    }
}

/// Grid cell of a projected point; the grid origin is UTM (0, 0).
pub fn cell_of(easting: f64, northing: f64, grid_m: f64) -> GridCell {
    GridCell::of(easting, northing, grid_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomeMethod {
    Night,
    Weekend,
}

impl HomeMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Night => "night",
            Self::Weekend => "weekend",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "night" => Some(Self::Night),
            "weekend" => Some(Self::Weekend),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeRecord {
    pub user_id: String,
    pub cell: GridCell,
    pub method: HomeMethod,
    /// Nights dominated (night rule) or weekend dwell seconds (fallback).
    pub support: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomeConfig {
    pub grid_m: f64,
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub min_nights: u32,
    pub min_weekend_s: i64,
    pub gap_cap_s: i64,
    /// Inclusive local dates.
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub min_active_days: u32,
    pub min_points_per_day: u32,
}

impl Default for HomeConfig {
    fn default() -> Self {
        Self {
            grid_m: 20.0,
            night_start_hour: 20,
            night_end_hour: 6,
            min_nights: 5,
            min_weekend_s: 6 * 3600,
            gap_cap_s: 6 * 3600,
            window_start: NaiveDate::from_ymd_opt(2022, 9, 1).unwrap(),
            window_end: NaiveDate::from_ymd_opt(2022, 9, 22).unwrap(),
            min_active_days: 15,
            min_points_per_day: 10,
        }
    }
}

impl HomeConfig {
    pub fn window(&self, clock: &LocalClock) -> Interval {
        Interval::new(
            clock.date_start(self.window_start),
            clock.date_start(self.window_end) + crate::time::SECONDS_PER_DAY,
        )
    }
}

fn pings_in<'a>(pings: &'a [CleanPing], window: &Interval) -> &'a [CleanPing] {
    let lo = pings.partition_point(|p| p.timestamp < window.start);
    let hi = pings.partition_point(|p| p.timestamp < window.end);
    &pings[lo..hi]
}

fn accumulate_dwell(
    pings: &[CleanPing],
    window: &Interval,
    grid_m: f64,
    gap_cap_s: i64,
    into: &mut BTreeMap<GridCell, i64>,
) {
    for pair in pings_in(pings, window).windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let dt = (b.timestamp - a.timestamp).min(gap_cap_s);
        *into.entry(cell_of(a.easting, a.northing, grid_m)).or_default() += dt;
    }
}

/// Seconds credited to each cell from consecutive ping pairs lying wholly in
/// `window`; each pair credits `min(dt, gap_cap_s)` to the earlier ping's cell.
pub fn cell_dwell(track: &UserTrack, window: Interval, grid_m: f64, gap_cap_s: i64) -> BTreeMap<GridCell, i64> {
    let mut out = BTreeMap::new();
    accumulate_dwell(&track.pings, &window, grid_m, gap_cap_s, &mut out);
    out
}

/// Largest dwell, ties to the lexicographically smallest cell.
fn dominant(dwell: &BTreeMap<GridCell, i64>) -> Option<(GridCell, i64)> {
    dwell
        .iter()
        .filter(|(_, &s)| s > 0)
        .fold(None, |best: Option<(GridCell, i64)>, (&c, &s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((c, s)),
        })
}

pub fn detect_home(track: &UserTrack, cfg: &HomeConfig, clock: &LocalClock) -> Option<HomeRecord> {
    if track.pings.is_empty() {
        return None;
    }
    let window = cfg.window(clock);
    let first_day = day_index_of_date(cfg.window_start);
    let last_day = day_index_of_date(cfg.window_end);

    // cell -> (nights dominated, total night dwell)
    let mut nights: BTreeMap<GridCell, (u32, i64)> = BTreeMap::new();
    let mut dwell = BTreeMap::new();
    for day in first_day..=last_day {
        let night = clock.night(day, cfg.night_start_hour, cfg.night_end_hour).clip(&window);
        if night.is_empty() {
            continue;
        }
        dwell.clear();
        accumulate_dwell(&track.pings, &night, cfg.grid_m, cfg.gap_cap_s, &mut dwell);
        for (&c, &s) in &dwell {
            nights.entry(c).or_default().1 += s;
        }
        if let Some((c, _)) = dominant(&dwell) {
            nights.entry(c).or_default().0 += 1;
        }
    }
    let night_home = nights.iter().filter(|(_, &(n, _))| n >= cfg.min_nights).fold(
        None,
        |best: Option<(GridCell, u32, i64)>, (&c, &(n, s))| match best {
            Some((_, bn, bs)) if (bn, bs) >= (n, s) => best,
            _ => Some((c, n, s)),
        },
    );
    if let Some((cell, n, _)) = night_home {
        return Some(HomeRecord {
            user_id: track.user_id.clone(),
            cell,
            method: HomeMethod::Night,
            support: n as i64,
        });
    }

    let mut weekend = BTreeMap::new();
    for sat in (first_day - 1)..=last_day {
        if LocalClock::weekday(sat) != 6 {
            continue;
        }
        let span = Interval::new(clock.day_start(sat), clock.day_start(sat + 2)).clip(&window);
        if !span.is_empty() {
            accumulate_dwell(&track.pings, &span, cfg.grid_m, cfg.gap_cap_s, &mut weekend);
        }
    }
    dominant(&weekend)
        .filter(|&(_, s)| s >= cfg.min_weekend_s)
        .map(|(cell, s)| HomeRecord {
            user_id: track.user_id.clone(),
            cell,
            method: HomeMethod::Weekend,
            support: s,
        })
}

/// Whether the track has at least `min_active_days` local days with at least
/// `min_points_per_day` pings each.
pub fn is_active(track: &UserTrack, min_days: u32, min_points_per_day: u32, clock: &LocalClock) -> bool {
    let mut days = 0u32;
    let mut current: Option<(i64, u32)> = None;
    for p in &track.pings {
        let d = clock.day_index(p.timestamp);
        current = match current {
            Some((cd, n)) if cd == d => Some((cd, n + 1)),
            Some((_, n)) => {
                if n >= min_points_per_day {
                    days += 1;
                }
                Some((d, 1))
            }
            None => Some((d, 1)),
        };
    }
    if let Some((_, n)) = current {
        if n >= min_points_per_day {
            days += 1;
        }
    }
    days >= min_days
}

pub fn filter_active_users(
    tracks: &TrackSet,
    min_days: u32,
    min_points_per_day: u32,
    clock: &LocalClock,
) -> BTreeSet<String> {
    tracks
        .values()
        .filter(|t| is_active(t, min_days, min_points_per_day, clock))
        .map(|t| t.user_id.clone())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HomeReport {
    pub users: u64,
    pub night_homes: u64,
    pub weekend_homes: u64,
    pub no_home: u64,
    pub inactive: u64,
}

/// Detects homes for every track, then drops users failing the activity
/// filter. Output is ordered by `user_id`.
pub fn infer_homes(tracks: &TrackSet, cfg: &HomeConfig, clock: &LocalClock) -> (Vec<HomeRecord>, HomeReport) {
    let users: Vec<&UserTrack> = tracks.values().collect();
    let detected: Vec<(Option<HomeRecord>, bool)> = users
        .par_iter()
        .map(|t| {
            let home = detect_home(t, cfg, clock);
            let active = home.is_some() && is_active(t, cfg.min_active_days, cfg.min_points_per_day, clock);
            (home, active)
        })
        .collect();
    let mut report = HomeReport {
        users: users.len() as u64,
        ..Default::default()
    };
    let mut homes = Vec::new();
    for (home, active) in detected {
        match home {
            None => report.no_home += 1,
            Some(_) if !active => report.inactive += 1,
            Some(h) => {
                match h.method {
                    HomeMethod::Night => report.night_homes += 1,
                    HomeMethod::Weekend => report.weekend_homes += 1,
                }
                homes.push(h);
            }
        }
    }
    (homes, report)
}
