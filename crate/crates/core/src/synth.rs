//! Ground-truth-labelled synthetic scenarios.
//!
//! Each agent follows a schedule built from a per-class template whose
//! timing satisfies the classification rules with margin, so that noise-free
//! gap-free pings at 12 or more per hour recover the true class.
//!
//! Randomness: every agent draws from its own `ChaCha8Rng`, seeded with
//! `splitmix64(seed ^ splitmix64(agent_index))`, where `splitmix64` is the
//! standard finalizer (increment `0x9E3779B97F4A7C15`, multipliers
//! `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`, shifts 30/27/31).

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{NaiveDate, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassifyConfig, EvacClass, OutcomeRow, StudyWindow};
use crate::home::cell_of;
use crate::ingest::{AccuracyClass, PingBuckets, PingRef, RawPing};
use crate::projection::utm17n_to_wgs84;
use crate::time::{LocalClock, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::zones::{load_zonemap, BufferConfig, OrderLevel, OrderRecord, Placement, ZoneClass, ZoneError, ZoneMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("invalid synth parameter {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error(transparent)]
    Zones(#[from] ZoneError),
    #[error("agent/user id mismatch: {0}")]
    IdMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for agent `index` under scenario `seed`.
pub fn agent_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}

/// A square zone given in UTM 17N metres with local order times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthZone {
    pub zone_id: String,
    pub county: String,
    pub min_e: f64,
    pub min_n: f64,
    pub side_m: f64,
    pub voluntary: Option<NaiveDateTime>,
    pub mandatory: Option<NaiveDateTime>,
}

fn at(d: u32, h: u32) -> Option<NaiveDateTime> {
    NaiveDate::from_ymd_opt(2022, 9, d).and_then(|d| d.and_hms_opt(h, 0, 0))
}

pub fn default_zones() -> Vec<SynthZone> {
    let z = |id: &str, county: &str, min_e: f64, v, m| SynthZone {
        zone_id: id.into(),
        county: county.into(),
        min_e,
        min_n: 3_080_000.0,
        side_m: 4_000.0,
        voluntary: v,
        mandatory: m,
    };
    vec![
        z("M1", "alpha", 330_000.0, None, at(26, 12)),
        z("V1", "beta", 340_000.0, at(25, 18), None),
        z("U1", "beta", 350_000.0, at(25, 12), at(27, 8)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Taken from the run's top-level `seed` when loaded from a config file.
    #[serde(skip)]
    pub seed: u64,
    /// Agents per class, keyed by class name.
    pub agents: BTreeMap<String, u32>,
    pub ping_rate_per_hour: f64,
    pub noise_sigma_m: f64,
    pub gap_prob: f64,
    /// First local date with data.
    pub data_start: NaiveDate,
    pub zones: Vec<SynthZone>,
    pub shelter_e: f64,
    pub shelter_n: f64,
    pub work_e: f64,
    pub work_n: f64,
    pub speed_mps: f64,
    /// Census population per synthetic resident.
    pub population_per_agent: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            agents: EvacClass::ALL.iter().map(|c| (c.as_str().to_owned(), 5)).collect(),
            ping_rate_per_hour: 12.0,
            noise_sigma_m: 0.0,
            gap_prob: 0.0,
            data_start: NaiveDate::from_ymd_opt(2022, 9, 8).unwrap(),
            zones: default_zones(),
            shelter_e: 270_000.0,
            shelter_n: 3_060_000.0,
            work_e: 300_000.0,
            work_n: 3_100_000.0,
            speed_mps: 20.0,
            population_per_agent: 20,
        }
    }
}

impl SynthConfig {
    pub fn with_counts(seed: u64, per_class: &[(EvacClass, u32)]) -> Self {
        Self {
            seed,
            agents: per_class.iter().map(|(c, n)| (c.as_str().to_owned(), *n)).collect(),
            ..Self::default()
        }
    }

    pub fn uniform(seed: u64, per_class: u32) -> Self {
        Self::with_counts(seed, &EvacClass::ALL.map(|c| (c, per_class)))
    }

    fn counts(&self) -> Result<Vec<(EvacClass, u32)>, SynthError> {
        let mut out = Vec::new();
        for (name, &n) in &self.agents {
            let class = EvacClass::parse(name).ok_or_else(|| SynthError::Invalid {
                field: "agents",
                reason: format!("unknown class {name:?}"),
            })?;
            out.push((class, n));
        }
        out.sort();
        Ok(out)
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: &str| {
            Err(SynthError::Invalid {
                field,
                reason: reason.into(),
            })
        };
        if !(self.ping_rate_per_hour > 0.0 && self.ping_rate_per_hour <= 3600.0) {
            return bad("ping_rate_per_hour", "must be in (0, 3600]");
        }
        if !(self.noise_sigma_m >= 0.0 && self.noise_sigma_m.is_finite()) {
            return bad("noise_sigma_m", "must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.gap_prob) {
            return bad("gap_prob", "must be in [0, 1]");
        }
        if !(self.speed_mps > 0.0) {
            return bad("speed_mps", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Place {
    pub e: f64,
    pub n: f64,
}

impl Place {
    fn dist(&self, o: &Place) -> f64 {
        (self.e - o.e).hypot(self.n - o.n)
    }
}

/// The agent is at `place` for `[start, end]`; gaps between stays are travel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduledStay {
    pub place: Place,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub agent_id: String,
    pub true_home: Place,
    pub home_zone_intent: ZoneClass,
    pub region: String,
    pub true_class: EvacClass,
    /// Time the agent leaves home for good; `None` for non-evacuees.
    pub departure: Option<i64>,
    pub schedule: Vec<ScheduledStay>,
    pub ping_rate: f64,
    pub noise_sigma: f64,
    pub gap_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub zones_geojson: String,
    pub orders_json: String,
    pub zonemap: ZoneMap,
    pub agents: Vec<AgentSpec>,
    pub window: StudyWindow,
}

pub fn zones_geojson(zones: &[SynthZone]) -> String {
    let features: Vec<serde_json::Value> = zones
        .iter()
        .map(|z| {
            let corners = [
                (z.min_e, z.min_n),
                (z.min_e + z.side_m, z.min_n),
                (z.min_e + z.side_m, z.min_n + z.side_m),
                (z.min_e, z.min_n + z.side_m),
                (z.min_e, z.min_n),
            ];
            let ring: Vec<[f64; 2]> = corners
                .iter()
                .map(|&(e, n)| {
                    let (lat, lon) = utm17n_to_wgs84(e, n);
                    [lon, lat]
                })
                .collect();
            serde_json::json!({
                "type": "Feature",
                "properties": {"zone_id": z.zone_id, "county": z.county},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            })
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({"type": "FeatureCollection", "features": features}))
        .expect("json values serialize")
}

pub fn orders_json(zones: &[SynthZone], clock: &LocalClock) -> String {
    let off = clock.utc_offset_s;
    let sign = if off < 0 { '-' } else { '+' };
    let utc_offset = format!("{sign}{:02}:{:02}", off.abs() / 3600, off.abs() % 3600 / 60);
    let mut records = Vec::new();
    for z in zones {
        for (level, t) in [
            (OrderLevel::Voluntary, z.voluntary),
            (OrderLevel::Mandatory, z.mandatory),
        ] {
            if let Some(t) = t {
                records.push(OrderRecord {
                    zone_id: z.zone_id.clone(),
                    level,
                    time_iso8601_local: t.format("%Y-%m-%dT%H:%M:%S").to_string(),
                    utc_offset: utc_offset.clone(),
                });
            }
        }
    }
    serde_json::to_string_pretty(&records).expect("orders serialize")
}

/// Timing anchors shared by all templates.
struct Anchors {
    window: StudyWindow,
    data_start: i64,
    /// Latest departure leaving at least one full night away.
    last_one_night: i64,
    /// Latest departure leaving at least three full nights away.
    last_three_nights: i64,
    night_start_hour: u32,
}

impl Anchors {
    fn new(cfg: &SynthConfig, ccfg: &ClassifyConfig) -> Self {
        let nights = ccfg.night_days();
        let night_start = |day: i64| ccfg.clock.night(day, ccfg.night_start_hour, ccfg.night_end_hour).start;
        Self {
            window: ccfg.window,
            data_start: ccfg.clock.date_start(cfg.data_start),
            last_one_night: night_start(nights.end - 1) - 2 * SECONDS_PER_HOUR,
            last_three_nights: night_start(nights.end - 3) - 2 * SECONDS_PER_HOUR,
            night_start_hour: ccfg.night_start_hour,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum HomeTarget {
    Zone(usize),
    Buffer,
}

struct Builder<'a> {
    cfg: &'a SynthConfig,
    ccfg: &'a ClassifyConfig,
    zonemap: &'a ZoneMap,
    a: Anchors,
    /// Zone order times (UTC) aligned with `cfg.zones`.
    orders: Vec<(Option<i64>, Option<i64>)>,
}

const MARGIN_H: i64 = SECONDS_PER_HOUR;

impl Builder<'_> {
    fn zone_index(&self, synth_idx: usize) -> usize {
        let id = &self.cfg.zones[synth_idx].zone_id;
        self.zonemap
            .zones
            .iter()
            .position(|z| &z.zone_id == id)
            .expect("zone loaded")
    }

    fn first_order(&self, i: usize) -> i64 {
        let (v, m) = self.orders[i];
        v.into_iter().chain(m).min().expect("zones carry orders")
    }

    /// Departure ranges (inclusive) admissible for `class` at each zone.
    fn zone_range(&self, class: EvacClass, i: usize) -> Option<(i64, i64)> {
        let w = &self.a.window;
        let (v, m) = self.orders[i];
        let range = match class {
            EvacClass::SelfEvacuee => (
                w.start + 6 * SECONDS_PER_HOUR,
                self.first_order(i) - 6 * SECONDS_PER_HOUR,
            ),
            EvacClass::VoluntaryEvacuee => {
                let v = v?;
                let upper = m.unwrap_or(i64::MAX).min(w.landfall).min(self.a.last_one_night);
                (v + MARGIN_H, upper - MARGIN_H)
            }
            EvacClass::MandatoryEvacuee => (m? + MARGIN_H, self.a.last_one_night),
            EvacClass::InZoneEvacuee => (w.start + 6 * SECONDS_PER_HOUR, w.landfall - 8 * SECONDS_PER_HOUR),
            _ => (w.start, w.end),
        };
        (range.0 < range.1).then_some(range)
    }

    fn buffer_range(&self, class: EvacClass, order_time: i64) -> Option<(i64, i64)> {
        let w = &self.a.window;
        let range = match class {
            EvacClass::SelfEvacuee => (w.start + 6 * SECONDS_PER_HOUR, order_time - 6 * SECONDS_PER_HOUR),
            EvacClass::ShadowEvacuee => (
                order_time + MARGIN_H,
                self.a.last_three_nights.min(w.landfall - MARGIN_H),
            ),
            _ => (w.start, w.end),
        };
        (range.0 < range.1).then_some(range)
    }

    fn targets(&self, class: EvacClass) -> Vec<HomeTarget> {
        let mut t: Vec<HomeTarget> = (0..self.cfg.zones.len())
            .filter(|&i| class != EvacClass::ShadowEvacuee && self.zone_range(class, i).is_some())
            .map(HomeTarget::Zone)
            .collect();
        let buffer_ok = matches!(
            class,
            EvacClass::NonEvacuee | EvacClass::Uncategorized | EvacClass::SelfEvacuee | EvacClass::ShadowEvacuee
        );
        if buffer_ok && !self.zonemap.buffer.is_empty() {
            t.push(HomeTarget::Buffer);
        }
        t
    }

    fn cell_center(&self, e: f64, n: f64) -> Place {
        let (e, n) = cell_of(e, n, self.ccfg.grid_m).center(self.ccfg.grid_m);
        Place { e, n }
    }

    fn point_in_zone(&self, rng: &mut ChaCha8Rng, i: usize, margin: f64) -> Place {
        let z = &self.cfg.zones[i];
        let e = z.min_e + margin + rng.random::<f64>() * (z.side_m - 2.0 * margin);
        let n = z.min_n + margin + rng.random::<f64>() * (z.side_m - 2.0 * margin);
        self.cell_center(e, n)
    }

    /// A home in the buffer ring just west of a random zone, with its
    /// component's order time.
    fn buffer_home(&self, rng: &mut ChaCha8Rng, class: EvacClass) -> Option<(Place, usize)> {
        for _ in 0..200 {
            let z = &self.cfg.zones[rng.random_range(0..self.cfg.zones.len())];
            let e = z.min_e - rng.random_range(1_500.0..5_000.0);
            let n = z.min_n + rng.random_range(300.0..z.side_m - 300.0);
            let p = self.cell_center(e, n);
            if let Placement::Buffer(b) = self.zonemap.place(p.e, p.n) {
                if self.buffer_range(class, self.zonemap.buffer[b].order_time).is_some() {
                    return Some((p, b));
                }
            }
        }
        None
    }

    fn jitter(&self, rng: &mut ChaCha8Rng, base: Place, radius: f64) -> Place {
        Place {
            e: base.e + rng.random_range(-radius..radius),
            n: base.n + rng.random_range(-radius..radius),
        }
    }

    fn travel(&self, from: &Place, to: &Place) -> i64 {
        (from.dist(to) / self.cfg.speed_mps).ceil() as i64 + 1
    }

    /// Pre-window routine: home at night, weekday work 08:30 to 17:00.
    fn routine(&self, home: Place, work: Place, until: i64) -> Vec<ScheduledStay> {
        let clock = &self.ccfg.clock;
        let mut out = Vec::new();
        let mut start = self.a.data_start;
        let leg = self.travel(&home, &work);
        let mut day = clock.day_index(self.a.data_start);
        loop {
            let d0 = clock.day_start(day);
            let leave = d0 + 8 * SECONDS_PER_HOUR + 1800;
            let back = d0 + 17 * SECONDS_PER_HOUR;
            if leave >= until {
                break;
            }
            let wd = LocalClock::weekday(day);
            if (1..=5).contains(&wd) {
                out.push(ScheduledStay {
                    place: home,
                    start,
                    end: leave,
                });
                out.push(ScheduledStay {
                    place: work,
                    start: leave + leg,
                    end: back,
                });
                start = back + leg;
            }
            day += 1;
        }
        debug_assert!(start < until);
        out.push(ScheduledStay {
            place: home,
            start,
            end: until,
        });
        out
    }

    fn sample(rng: &mut ChaCha8Rng, (lo, hi): (i64, i64)) -> i64 {
        rng.random_range(lo..=hi)
    }

    fn agent(&self, index: usize, class: EvacClass) -> Result<AgentSpec, SynthError> {
        let seed = agent_seed(self.cfg.seed, index as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = self.targets(class);
        if targets.is_empty() {
            return Err(SynthError::Infeasible(format!("no zone layout admits {class} agents")));
        }
        let target = targets[rng.random_range(0..targets.len())];
        let w = self.a.window;
        let (home, range, placement) = match target {
            HomeTarget::Zone(i) => {
                let home = self.point_in_zone(&mut rng, i, 300.0);
                (
                    home,
                    self.zone_range(class, i).expect("target admits"),
                    Placement::Zone(self.zone_index(i)),
                )
            }
            HomeTarget::Buffer => {
                let (home, b) = self
                    .buffer_home(&mut rng, class)
                    .ok_or_else(|| SynthError::Infeasible(format!("no buffer location admits {class} agents")))?;
                let range = self
                    .buffer_range(class, self.zonemap.buffer[b].order_time)
                    .expect("checked");
                (home, range, Placement::Buffer(b))
            }
        };
        let work = self.jitter(
            &mut rng,
            Place {
                e: self.cfg.work_e,
                n: self.cfg.work_n,
            },
            3_000.0,
        );
        let shelter = self.jitter(
            &mut rng,
            Place {
                e: self.cfg.shelter_e,
                n: self.cfg.shelter_n,
            },
            5_000.0,
        );
        let study_start = w.start;
        let mut schedule = self.routine(home, work, study_start);
        let last = schedule.last_mut().expect("routine ends at home");
        let mut departure = None;
        match class {
            EvacClass::NonEvacuee => {
                // a daytime errand that never touches a night
                let day = self.ccfg.clock.day_index(study_start) + rng.random_range(0..6);
                let d0 = self.ccfg.clock.day_start(day);
                let leave = d0 + rng.random_range(9..12) * SECONDS_PER_HOUR;
                let back = leave + 3 * SECONDS_PER_HOUR;
                let leg = self.travel(&home, &work);
                last.end = leave;
                schedule.push(ScheduledStay {
                    place: work,
                    start: leave + leg,
                    end: back,
                });
                schedule.push(ScheduledStay {
                    place: home,
                    start: back + leg,
                    end: w.end,
                });
                debug_assert!(self.a.night_start_hour >= 16);
            }
            EvacClass::Uncategorized => {
                last.end = study_start + SECONDS_PER_DAY + 12 * SECONDS_PER_HOUR;
            }
            EvacClass::InZoneEvacuee => {
                let dep = Self::sample(&mut rng, range);
                let mut dest = home;
                while dest.dist(&home) < 500.0 {
                    let zi = rng.random_range(0..self.cfg.zones.len());
                    dest = self.point_in_zone(&mut rng, zi, 300.0);
                }
                last.end = dep;
                schedule.push(ScheduledStay {
                    place: dest,
                    start: dep + self.travel(&home, &dest),
                    end: w.end,
                });
                departure = Some(dep);
            }
            EvacClass::MandatoryEvacuee if rng.random_bool(0.25) && range.1 > w.landfall + MARGIN_H => {
                let dep = Self::sample(&mut rng, (range.0.max(w.landfall + MARGIN_H), range.1));
                last.end = dep;
                schedule.push(ScheduledStay {
                    place: shelter,
                    start: dep + self.travel(&home, &shelter),
                    end: w.end,
                });
                departure = Some(dep);
            }
            _ => {
                let dep = Self::sample(&mut rng, range);
                last.end = dep;
                schedule.push(ScheduledStay {
                    place: shelter,
                    start: dep + self.travel(&home, &shelter),
                    end: w.end,
                });
                departure = Some(dep);
            }
        }
        if class.is_evacuee() {
            debug_assert!(departure.is_some());
        }
        Ok(AgentSpec {
            agent_id: format!("agent{index:05}"),
            true_home: home,
            home_zone_intent: match placement {
                Placement::Zone(i) => self.zonemap.zones[i].class(),
                _ => ZoneClass::Buffer,
            },
            region: self.zonemap.county_of(placement).unwrap_or_default().to_owned(),
            true_class: class,
            departure,
            schedule,
            ping_rate: self.cfg.ping_rate_per_hour,
            noise_sigma: self.cfg.noise_sigma_m,
            gap_prob: self.cfg.gap_prob,
            seed,
        })
    }
}

/// Builds zones, orders and agent schedules. Deterministic in `(cfg, ccfg)`.
pub fn generate_scenario(
    cfg: &SynthConfig,
    ccfg: &ClassifyConfig,
    buffer: &BufferConfig,
) -> Result<Scenario, SynthError> {
    cfg.validate()?;
    let counts = cfg.counts()?;
    let total: u32 = counts.iter().map(|c| c.1).sum();
    if total > 0 && cfg.zones.is_empty() {
        return Err(SynthError::Infeasible(
            "agents requested but no zones configured".into(),
        ));
    }
    let zones_geojson = zones_geojson(&cfg.zones);
    let orders_json = orders_json(&cfg.zones, &ccfg.clock);
    let zonemap = load_zonemap(&zones_geojson, &orders_json, buffer)?;
    let local = |t: Option<NaiveDateTime>| t.map(|t| ccfg.clock.local_to_utc(t));
    let b = Builder {
        cfg,
        ccfg,
        zonemap: &zonemap,
        a: Anchors::new(cfg, ccfg),
        orders: cfg
            .zones
            .iter()
            .map(|z| (local(z.voluntary), local(z.mandatory)))
            .collect(),
    };
    if b.a.data_start >= ccfg.window.start {
        return Err(SynthError::Infeasible(
            "data_start must precede the study window".into(),
        ));
    }
    if zonemap.locate(cfg.shelter_e, cfg.shelter_n) != ZoneClass::Outside {
        return Err(SynthError::Infeasible(
            "shelter lies inside a zone or the buffer".into(),
        ));
    }
    let jobs: Vec<(usize, EvacClass)> = counts
        .iter()
        .flat_map(|&(c, n)| std::iter::repeat_n(c, n as usize))
        .enumerate()
        .collect();
    let agents = jobs
        .par_iter()
        .map(|&(i, c)| b.agent(i, c))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scenario {
        zones_geojson,
        orders_json,
        zonemap,
        agents,
        window: ccfg.window,
    })
}

impl AgentSpec {
    /// Data ends with the last scheduled stay.
    pub fn data_end(&self) -> i64 {
        self.schedule.last().map_or(0, |s| s.end)
    }

    fn position(&self, t: i64, cursor: &mut usize) -> Place {
        let s = &self.schedule;
        while *cursor + 1 < s.len() && t > s[*cursor].end {
            if t < s[*cursor + 1].start {
                let (a, b) = (&s[*cursor], &s[*cursor + 1]);
                let f = (t - a.end) as f64 / (b.start - a.end) as f64;
                return Place {
                    e: a.place.e + f * (b.place.e - a.place.e),
                    n: a.place.n + f * (b.place.n - a.place.n),
                };
            }
            *cursor += 1;
        }
        s[*cursor].place
    }

    /// Emits `(timestamp, easting, northing)` for every retained ping, in
    /// time order. One ping per slot of `3600 / ping_rate` seconds at a
    /// uniform offset, then dropped with probability `gap_prob`, then
    /// perturbed by isotropic Gaussian noise.
    pub fn for_each_ping(&self, mut f: impl FnMut(i64, f64, f64)) {
        let Some(first) = self.schedule.first() else { return };
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed));
        let width = ((3600.0 / self.ping_rate).round() as i64).max(1);
        let noise = (self.noise_sigma > 0.0).then(|| Normal::new(0.0, self.noise_sigma).expect("sigma checked"));
        let end = self.data_end();
        let mut cursor = 0;
        let mut slot = first.start;
        while slot < end {
            let t = slot + rng.random_range(0..width);
            let keep = !rng.random_bool(self.gap_prob);
            let (de, dn) = match &noise {
                Some(d) => (d.sample(&mut rng), d.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            slot += width;
            if t > end || !keep {
                continue;
            }
            let p = self.position(t, &mut cursor);
            f(t, p.e + de, p.n + dn);
        }
    }

    pub fn pings(&self) -> Vec<RawPing> {
        let mut out = Vec::new();
        self.for_each_ping(|t, e, n| {
            let (lat, lon) = utm17n_to_wgs84(e, n);
            out.push(RawPing {
                user_id: self.agent_id.clone(),
                timestamp: t,
                lat,
                lon,
                accuracy: AccuracyClass::High,
            })
        });
        out
    }
}

const CHUNK: usize = 32;

/// Retained pings of all agents as WGS84 records, agent by agent, chunked so
/// only a few agents' pings are buffered at once.
pub fn for_each_scenario_ping(scenario: &Scenario, mut f: impl FnMut(PingRef<'_>)) {
    for chunk in scenario.agents.chunks(CHUNK) {
        let per_agent: Vec<Vec<(i64, f64, f64)>> = chunk
            .par_iter()
            .map(|a| {
                let mut v = Vec::new();
                a.for_each_ping(|t, e, n| {
                    let (lat, lon) = utm17n_to_wgs84(e, n);
                    v.push((t, lat, lon));
                });
                v
            })
            .collect();
        for (a, pings) in chunk.iter().zip(per_agent) {
            for (t, lat, lon) in pings {
                f(PingRef {
                    user_id: &a.agent_id,
                    timestamp: t,
                    lat,
                    lon,
                    accuracy: AccuracyClass::High,
                });
            }
        }
    }
}

/// The scenario's pings bucketed for cleaning.
pub fn scenario_buckets(scenario: &Scenario) -> PingBuckets {
    let mut b = PingBuckets::new();
    for_each_scenario_ping(scenario, |p| b.push_counted(p));
    b
}

#[derive(Serialize)]
struct WirePing<'a> {
    user_id: &'a str,
    ts: i64,
    lat: f64,
    lon: f64,
    acc: &'a str,
}

pub fn write_pings_ndjson<W: Write>(scenario: &Scenario, w: W) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(w);
    let mut err = None;
    for_each_scenario_ping(scenario, |p| {
        if err.is_some() {
            return;
        }
        let rec = WirePing {
            user_id: p.user_id,
            ts: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            acc: p.accuracy.as_str(),
        };
        let r = serde_json::to_writer(&mut w, &rec)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"));
        if let Err(e) = r {
            err = Some(e);
        }
    });
    match err {
        Some(e) => Err(e),
        None => w.flush(),
    }
}

/// Census population per county.
pub fn census(scenario: &Scenario, population_per_agent: u64) -> BTreeMap<String, u64> {
    let mut out: BTreeMap<String, u64> = scenario.zonemap.zones.iter().map(|z| (z.county.clone(), 0)).collect();
    for a in &scenario.agents {
        *out.entry(a.region.clone()).or_default() += population_per_agent;
    }
    out
}

pub fn write_census_csv<W: Write>(census: &BTreeMap<String, u64>, w: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["region", "population"])?;
    for (r, p) in census {
        w.write_record([r.as_str(), &p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth_csv<W: Write>(scenario: &Scenario, w: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["agent_id", "true_class", "departure"])?;
    for a in &scenario.agents {
        let dep = a.departure.map(|d| d.to_string()).unwrap_or_default();
        w.write_record([a.agent_id.as_str(), a.true_class.as_str(), &dep])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth_csv<R: std::io::Read>(r: R) -> Result<Vec<(String, EvacClass)>, SynthError> {
    let mut out = Vec::new();
    for rec in csv::Reader::from_reader(r).into_records() {
        let rec = rec.map_err(|e| SynthError::Invalid {
            field: "truth.csv",
            reason: e.to_string(),
        })?;
        let class = EvacClass::parse(rec.get(1).unwrap_or("")).ok_or_else(|| SynthError::Invalid {
            field: "truth.csv",
            reason: format!("unknown class in {rec:?}"),
        })?;
        out.push((rec.get(0).unwrap_or("").to_owned(), class));
    }
    Ok(out)
}

pub fn truth_labels(scenario: &Scenario) -> Vec<(String, EvacClass)> {
    scenario
        .agents
        .iter()
        .map(|a| (a.agent_id.clone(), a.true_class))
        .collect()
}

/// Inferred label per truth id. Users the pipeline dropped before
/// classification (no home, inactive, or home outside every zone) count as
/// uncategorized.
pub fn inferred_labels(truth: &[(String, EvacClass)], outcomes: &[OutcomeRow]) -> Vec<(String, EvacClass)> {
    let by_id: BTreeMap<&str, EvacClass> = outcomes.iter().map(|o| (o.user_id.as_str(), o.class)).collect();
    truth
        .iter()
        .map(|(id, _)| {
            (
                id.clone(),
                by_id.get(id.as_str()).copied().unwrap_or(EvacClass::Uncategorized),
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// `matrix[true][inferred]`, indexed by [`EvacClass::index`].
    pub matrix: [[u64; 7]; 7],
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..7).map(|i| self.matrix[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let t = self.total();
        if t == 0 {
            0.0
        } else {
            self.correct() as f64 / t as f64
        }
    }

    pub fn is_diagonal(&self) -> bool {
        (0..7).all(|i| (0..7).all(|j| i == j || self.matrix[i][j] == 0))
    }
}

/// Confusion matrix of inferred against true labels. Both lists must carry
/// the same id set.
pub fn score_recovery(
    truth: &[(String, EvacClass)],
    inferred: &[(String, EvacClass)],
) -> Result<Confusion, SynthError> {
    let inferred: BTreeMap<&str, EvacClass> = inferred.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    let truth_ids: BTreeMap<&str, EvacClass> = truth.iter().map(|(id, c)| (id.as_str(), *c)).collect();
    if truth_ids.len() != truth.len() {
        return Err(SynthError::IdMismatch("duplicate truth ids".into()));
    }
    if let Some(id) = inferred.keys().find(|k| !truth_ids.contains_key(*k)) {
        return Err(SynthError::IdMismatch(format!("{id} has no truth label")));
    }
    let mut m = Confusion { matrix: [[0; 7]; 7] };
    for (id, t) in truth_ids {
        let i = inferred
            .get(id)
            .ok_or_else(|| SynthError::IdMismatch(format!("{id} has no inferred label")))?;
        m.matrix[t.index()][i.index()] += 1;
    }
    Ok(m)
}
