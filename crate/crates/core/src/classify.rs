//! Evacuation behavior inference.
//!
//! For every homed user inside an evacuation zone or the buffer ring:
//! find the dominant place of each study night, impute data-free nights,
//! derive the home departure time, and assign one of seven classes.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::home::{GridCell, HomeRecord};
use crate::staypoints::Activity;
use crate::time::{date_of_day_index, day_index_of_date, Interval, LocalClock, SECONDS_PER_DAY};
use crate::zones::{OrderEvent, OrderLevel, Placement, ZoneClass, ZoneMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvacClass {
    NonEvacuee,
    ShadowEvacuee,
    SelfEvacuee,
    VoluntaryEvacuee,
    MandatoryEvacuee,
    InZoneEvacuee,
    Uncategorized,
}

impl EvacClass {
    pub const ALL: [EvacClass; 7] = [
        Self::NonEvacuee,
        Self::ShadowEvacuee,
        Self::SelfEvacuee,
        Self::VoluntaryEvacuee,
        Self::MandatoryEvacuee,
        Self::InZoneEvacuee,
        Self::Uncategorized,
    ];

    /// Classes that left home.
    pub const EVACUEES: [EvacClass; 5] = [
        Self::ShadowEvacuee,
        Self::SelfEvacuee,
        Self::VoluntaryEvacuee,
        Self::MandatoryEvacuee,
        Self::InZoneEvacuee,
    ];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn is_evacuee(&self) -> bool {
        Self::EVACUEES.contains(self)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NonEvacuee => "non_evacuee",
            Self::ShadowEvacuee => "shadow_evacuee",
            Self::SelfEvacuee => "self_evacuee",
            Self::VoluntaryEvacuee => "voluntary_evacuee",
            Self::MandatoryEvacuee => "mandatory_evacuee",
            Self::InZoneEvacuee => "in_zone_evacuee",
            Self::Uncategorized => "uncategorized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl std::fmt::Display for EvacClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Place category for nightly dominance. Declaration order is the tie
/// precedence, highest first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NightZone {
    Home,
    Mandatory,
    Voluntary,
    Buffer,
    Other,
}

impl NightZone {
    pub const ALL: [NightZone; 5] = [Self::Home, Self::Mandatory, Self::Voluntary, Self::Buffer, Self::Other];

    pub fn from_zone_class(c: ZoneClass) -> Self {
        match c {
            ZoneClass::Mandatory => Self::Mandatory,
            ZoneClass::Voluntary => Self::Voluntary,
            ZoneClass::Buffer => Self::Buffer,
            ZoneClass::Outside => Self::Other,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Home => "home",
            Self::Mandatory => "mandatory",
            Self::Voluntary => "voluntary",
            Self::Buffer => "buffer",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightRecord {
    pub date: NaiveDate,
    /// `None` when no activity overlapped the night.
    pub dominant: Option<NightZone>,
    pub imputed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyWindow {
    pub start: i64,
    pub end: i64,
    pub landfall: i64,
    pub post_departure_s: i64,
}

impl StudyWindow {
    /// The default event: local Sep 23 through Sep 29 2022, landfall 19:05 UTC Sep 28.
    pub fn hurricane_ian(clock: &LocalClock) -> Self {
        let start = NaiveDate::from_ymd_opt(2022, 9, 23).unwrap();
        let end = NaiveDate::from_ymd_opt(2022, 9, 30).unwrap();
        let landfall = NaiveDate::from_ymd_opt(2022, 9, 28)
            .unwrap()
            .and_hms_opt(19, 5, 0)
            .unwrap()
            .and_utc()
            .timestamp();
        Self {
            start: clock.date_start(start),
            end: clock.date_start(end),
            landfall,
            post_departure_s: 4 * SECONDS_PER_DAY,
        }
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyConfig {
    pub window: StudyWindow,
    pub clock: LocalClock,
    pub grid_m: f64,
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub min_nights_away_zone: u32,
    pub min_nights_away_buffer: u32,
    pub max_missing_nights: u32,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        let clock = LocalClock::eastern_daylight();
        Self {
            window: StudyWindow::hurricane_ian(&clock),
            clock,
            grid_m: 20.0,
            night_start_hour: 20,
            night_end_hour: 6,
            min_nights_away_zone: 1,
            min_nights_away_buffer: 3,
            max_missing_nights: 3,
        }
    }
}

impl ClassifyConfig {
    /// Local days whose nights make up the study (those starting inside the window).
    pub fn night_days(&self) -> std::ops::Range<i64> {
        let first = self.clock.day_index(self.window.start);
        let last = self.clock.day_index(self.window.end - 1);
        first..last + 1
    }
}

/// An activity clipped to the study window, with its place resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stay {
    pub start: i64,
    pub end: i64,
    pub at_home: bool,
    pub zone: ZoneClass,
}

impl Stay {
    fn category(&self) -> NightZone {
        if self.at_home {
            NightZone::Home
        } else {
            NightZone::from_zone_class(self.zone)
        }
    }
}

/// Clips activities to the study window and resolves home/zone membership.
pub fn resolve_stays(activities: &[Activity], home: GridCell, zonemap: &ZoneMap, cfg: &ClassifyConfig) -> Vec<Stay> {
    let window = cfg.window.interval();
    activities
        .iter()
        .filter(|a| a.start < window.end && a.end > window.start)
        .map(|a| Stay {
            start: a.start.max(window.start),
            end: a.end.min(window.end),
            at_home: home.contains(a.centroid_e, a.centroid_n, cfg.grid_m),
            zone: zonemap.locate(a.centroid_e, a.centroid_n),
        })
        .collect()
}

pub fn nightly_dominant_stays(stays: &[Stay], cfg: &ClassifyConfig) -> Vec<NightRecord> {
    cfg.night_days()
        .map(|day| {
            let night = cfg.clock.night(day, cfg.night_start_hour, cfg.night_end_hour);
            let mut time = [0i64; 5];
            for s in stays {
                let o = night.overlap(s.start, s.end);
                if o > 0 {
                    time[s.category() as usize] += o;
                }
            }
            // strict ">" keeps the earlier (higher precedence) category on ties
            let dominant = NightZone::ALL
                .into_iter()
                .fold(None, |best: Option<(NightZone, i64)>, z| {
                    let t = time[z as usize];
                    match best {
                        Some((_, bt)) if bt >= t => best,
                        _ if t > 0 => Some((z, t)),
                        _ => best,
                    }
                })
                .map(|(z, _)| z);
            NightRecord {
                date: date_of_day_index(day),
                dominant,
                imputed: false,
            }
        })
        .collect()
}

/// Dominant place for each study night.
pub fn nightly_dominant(
    activities: &[Activity],
    home: GridCell,
    zonemap: &ZoneMap,
    cfg: &ClassifyConfig,
) -> Vec<NightRecord> {
    nightly_dominant_stays(&resolve_stays(activities, home, zonemap, cfg), cfg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Imputation {
    Filled(Vec<NightRecord>),
    /// More missing nights than allowed.
    Uncategorized {
        missing: u32,
    },
}

/// Fills each missing night from the nearest later observed night, or the
/// nearest earlier one when none follows.
pub fn impute_nights(nights: &[NightRecord], max_missing: u32) -> Imputation {
    let missing = nights.iter().filter(|n| n.dominant.is_none()).count() as u32;
    if missing > max_missing || missing as usize == nights.len() {
        return Imputation::Uncategorized { missing };
    }
    let mut out = nights.to_vec();
    for i in 0..out.len() {
        if out[i].dominant.is_some() {
            continue;
        }
        let later = nights[i + 1..].iter().find_map(|n| n.dominant);
        let earlier = nights[..i].iter().rev().find_map(|n| n.dominant);
        out[i].dominant = later.or(earlier);
        out[i].imputed = true;
    }
    Imputation::Filled(out)
}

pub fn departure_from_stays(stays: &[Stay]) -> Option<i64> {
    stays
        .iter()
        .filter(|s| s.at_home)
        .map(|s| s.end)
        .max()
        .or_else(|| stays.iter().map(|s| s.start).min())
}

/// End of the last home activity in the window, else the start of the first
/// activity, else `None`.
pub fn departure_time(activities: &[Activity], home: GridCell, zonemap: &ZoneMap, cfg: &ClassifyConfig) -> Option<i64> {
    departure_from_stays(&resolve_stays(activities, home, zonemap, cfg))
}

/// The order context of a user's home.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HomeZone {
    /// Inside an evacuation zone with these order events (time ordered).
    Zone { class: ZoneClass, orders: Vec<OrderEvent> },
    /// In the buffer ring governed by this order time.
    Buffer { order_time: i64 },
}

impl HomeZone {
    pub fn class(&self) -> ZoneClass {
        match self {
            Self::Zone { class, .. } => *class,
            Self::Buffer { .. } => ZoneClass::Buffer,
        }
    }

    pub fn resolve(zonemap: &ZoneMap, placement: Placement) -> Option<Self> {
        match placement {
            Placement::Zone(i) => {
                let z = &zonemap.zones[i];
                Some(Self::Zone {
                    class: z.class(),
                    orders: z.orders.clone(),
                })
            }
            Placement::Buffer(i) => Some(Self::Buffer {
                order_time: zonemap.buffer[i].order_time,
            }),
            Placement::Outside => None,
        }
    }
}

/// Whether no post-departure stay lies inside an evacuation zone during the
/// clean window (`[departure, landfall]`, or `[departure, departure + horizon]`
/// for departures after landfall).
pub fn clear_of_zones(stays: &[Stay], departure: i64, window: &StudyWindow) -> bool {
    let (a, b) = if departure <= window.landfall {
        (departure, window.landfall)
    } else {
        (departure, departure + window.post_departure_s)
    };
    !stays.iter().any(|s| {
        let home_before_departure = s.at_home && s.end <= departure;
        !home_before_departure && s.zone.is_evacuation_zone() && s.start <= b && s.end >= a
    })
}

pub fn nights_away(nights: &[NightRecord]) -> u32 {
    nights.iter().filter(|n| n.dominant != Some(NightZone::Home)).count() as u32
}

/// Class for a user whose nights are already imputed.
///
/// # Panics
/// If `departure` is `None` while the user has nights away; imputation
/// guarantees in-window activity in that case.
pub fn classify_user(
    nights: &[NightRecord],
    departure: Option<i64>,
    home_zone: &HomeZone,
    stays: &[Stay],
    cfg: &ClassifyConfig,
) -> EvacClass {
    let away = nights_away(nights);
    let threshold = match home_zone {
        HomeZone::Zone { .. } => cfg.min_nights_away_zone,
        HomeZone::Buffer { .. } => cfg.min_nights_away_buffer,
    };
    if away < threshold || away == 0 {
        return EvacClass::NonEvacuee;
    }
    let departure = departure.expect("nights with activity imply a departure time");
    if !clear_of_zones(stays, departure, &cfg.window) {
        return EvacClass::InZoneEvacuee;
    }
    match home_zone {
        HomeZone::Zone { orders, .. } => {
            let earliest = orders.iter().map(|o| o.time).min().expect("zones carry orders");
            if departure < earliest {
                EvacClass::SelfEvacuee
            } else if orders
                .iter()
                .any(|o| o.level == OrderLevel::Mandatory && o.time <= departure)
            {
                EvacClass::MandatoryEvacuee
            } else {
                EvacClass::VoluntaryEvacuee
            }
        }
        HomeZone::Buffer { order_time } => {
            if departure < *order_time {
                EvacClass::SelfEvacuee
            } else {
                EvacClass::ShadowEvacuee
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserOutcome {
    pub user_id: String,
    pub home: HomeRecord,
    pub home_zone: ZoneClass,
    pub region: String,
    pub class: EvacClass,
    pub departure: Option<i64>,
    pub nights: Vec<NightRecord>,
}

/// The per-user fields downstream aggregation needs; one row of the outcome file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub user_id: String,
    pub class: EvacClass,
    pub departure_utc: Option<i64>,
    pub home_zone: ZoneClass,
    pub nights_away: u32,
    pub imputed_nights: u32,
    pub region: String,
}

impl UserOutcome {
    pub fn row(&self) -> OutcomeRow {
        OutcomeRow {
            user_id: self.user_id.clone(),
            class: self.class,
            departure_utc: self.departure,
            home_zone: self.home_zone,
            nights_away: self.nights_away(),
            imputed_nights: self.imputed_nights(),
            region: self.region.clone(),
        }
    }

    pub fn nights_away(&self) -> u32 {
        nights_away(&self.nights)
    }

    pub fn imputed_nights(&self) -> u32 {
        self.nights.iter().filter(|n| n.imputed).count() as u32
    }
}

/// Full per-user inference. `None` when the home lies outside every zone and
/// the buffer ring.
pub fn infer_outcome(
    home: &HomeRecord,
    activities: &[Activity],
    zonemap: &ZoneMap,
    cfg: &ClassifyConfig,
) -> Option<UserOutcome> {
    let (ce, cn) = home.cell.center(cfg.grid_m);
    let placement = zonemap.place(ce, cn);
    let home_zone = HomeZone::resolve(zonemap, placement)?;
    let region = zonemap.county_of(placement).unwrap_or_default().to_owned();
    let stays = resolve_stays(activities, home.cell, zonemap, cfg);
    let raw_nights = nightly_dominant_stays(&stays, cfg);
    let (class, departure, nights) = match impute_nights(&raw_nights, cfg.max_missing_nights) {
        Imputation::Uncategorized { .. } => (EvacClass::Uncategorized, None, raw_nights),
        Imputation::Filled(nights) => {
            let departure = departure_from_stays(&stays);
            let class = classify_user(&nights, departure, &home_zone, &stays, cfg);
            let departure = if class.is_evacuee() { departure } else { None };
            (class, departure, nights)
        }
    };
    Some(UserOutcome {
        user_id: home.user_id.clone(),
        home: home.clone(),
        home_zone: home_zone.class(),
        region,
        class,
        departure,
        nights,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub homed_users: u64,
    pub outside_excluded: u64,
    pub classified: u64,
}

/// Classifies every homed user; `activities` must be grouped by user.
pub fn classify_all(
    homes: &[HomeRecord],
    activities: &BTreeMap<String, Vec<Activity>>,
    zonemap: &ZoneMap,
    cfg: &ClassifyConfig,
) -> (Vec<UserOutcome>, ClassifyReport) {
    let empty = Vec::new();
    let results: Vec<Option<UserOutcome>> = homes
        .par_iter()
        .map(|h| infer_outcome(h, activities.get(&h.user_id).unwrap_or(&empty), zonemap, cfg))
        .collect();
    let mut report = ClassifyReport {
        homed_users: homes.len() as u64,
        ..Default::default()
    };
    let mut out: Vec<UserOutcome> = results.into_iter().flatten().collect();
    out.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    report.classified = out.len() as u64;
    report.outside_excluded = report.homed_users - report.classified;
    (out, report)
}

pub fn group_activities(activities: Vec<Activity>) -> BTreeMap<String, Vec<Activity>> {
    let mut out: BTreeMap<String, Vec<Activity>> = BTreeMap::new();
    for a in activities {
        out.entry(a.user_id.clone()).or_default().push(a);
    }
    for v in out.values_mut() {
        v.sort_by_key(|a| a.start);
    }
    out
}

pub fn night_day_index(date: NaiveDate) -> i64 {
    day_index_of_date(date)
}
