use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use chrono::NaiveDate;
use evacmob::classify::{classify_all, infer_outcome, ClassifyConfig, EvacClass};
use evacmob::home::{cell_of, detect_home, GridCell, HomeConfig, HomeMethod, HomeRecord};
use evacmob::ingest::{
    clean_tracks, normalize_pings, read_tracks, reclean_tracks, write_tracks, AccuracyClass, CleanConfig, CleanPing,
    RawPing, UserTrack,
};
use evacmob::metrics::{rates, response_curve, sampling_rate, wave_summary, Denominator, GroupCounts, WaveWindow};
use evacmob::projection::project_wgs84_to_utm17n;
use evacmob::staypoints::{extract_activities, Activity, StayPointConfig, StayPointExtractor};
use evacmob::synth::{default_zones, generate_scenario, orders_json, zones_geojson, SynthConfig};
use evacmob::time::LocalClock;
use evacmob::zones::{load_zonemap, BufferConfig, ZoneClass, ZoneMap};
use proptest::prelude::*;
use proptest::test_runner::TestRunner;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

pub type Outcome = Result<(), String>;

fn run<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Outcome {
    let config = ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    };
    TestRunner::new(config).run(&strategy, test).map_err(|e| e.to_string())
}

fn shuffled<T: Clone>(v: &[T], seed: u64) -> Vec<T> {
    let mut out = v.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

fn clock() -> LocalClock {
    LocalClock::eastern_daylight()
}

fn date(m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(2022, m, d).unwrap()
}

/// The synthetic zone layout: three 4 km squares 6 km apart.
fn zonemap() -> &'static ZoneMap {
    static ZM: OnceLock<ZoneMap> = OnceLock::new();
    ZM.get_or_init(|| {
        let z = default_zones();
        load_zonemap(&zones_geojson(&z), &orders_json(&z, &clock()), &BufferConfig::default()).unwrap()
    })
}

pub mod ingest {
    use super::*;

    fn pool(n: usize) -> &'static rayon::ThreadPool {
        static ONE: OnceLock<rayon::ThreadPool> = OnceLock::new();
        static FOUR: OnceLock<rayon::ThreadPool> = OnceLock::new();
        let cell = if n == 1 { &ONE } else { &FOUR };
        cell.get_or_init(|| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap())
    }

    fn ping() -> impl Strategy<Value = (i64, f64, f64, u8, bool)> {
        (
            0i64..400,
            25.0f64..30.0,
            -83.0f64..-79.0,
            0u8..10,
            prop::bool::weighted(0.03),
        )
    }

    fn raw_pings() -> impl Strategy<Value = Vec<RawPing>> {
        prop::collection::vec((prop::collection::vec(ping(), 100..220), 0usize..40), 1..4).prop_map(|users| {
            let mut out = Vec::new();
            for (u, (pings, dups)) in users.into_iter().enumerate() {
                let start = out.len();
                for (ts, lat, lon, acc, off_band) in pings {
                    let accuracy = match acc {
                        0 => AccuracyClass::Other,
                        1..=4 => AccuracyClass::MediumHigh,
                        _ => AccuracyClass::High,
                    };
                    out.push(RawPing {
                        user_id: format!("u{u}"),
                        timestamp: 1_662_000_000 + ts * 60,
                        lat,
                        lon: if off_band { -85.0 } else { lon },
                        accuracy,
                    });
                }
                let n = out.len() - start;
                for k in 0..dups {
                    let copy = out[start + (k * 7919) % n].clone();
                    out.push(copy);
                }
            }
            out
        })
    }

    type Key = (i64, u64, u64);

    /// Independent oracle: per user, the set of distinct projected kept pings.
    fn expected(pings: &[RawPing], cfg: &CleanConfig) -> BTreeMap<String, BTreeSet<Key>> {
        let mut per_user: BTreeMap<String, BTreeSet<Key>> = BTreeMap::new();
        for p in pings {
            let set = per_user.entry(p.user_id.clone()).or_default();
            if !cfg.accuracy_keep.contains(&p.accuracy) {
                continue;
            }
            if let Ok((e, n)) = project_wgs84_to_utm17n(p.lat, p.lon) {
                set.insert((p.timestamp, e.to_bits(), n.to_bits()));
            }
        }
        per_user.retain(|_, s| s.len() >= cfg.min_points);
        per_user
    }

    fn keys(t: &UserTrack) -> Vec<Key> {
        t.pings
            .iter()
            .map(|p| (p.timestamp, p.easting.to_bits(), p.northing.to_bits()))
            .collect()
    }

    pub fn survivors_match_filter_oracle(cases: u32) -> Outcome {
        run(cases, raw_pings(), |pings| {
            let cfg = CleanConfig::default();
            let out = clean_tracks(&pings, &cfg);
            let want = expected(&pings, &cfg);
            prop_assert_eq!(out.tracks.len(), want.len());
            for (id, set) in &want {
                let t = &out.tracks[id];
                prop_assert!(t.pings.len() >= cfg.min_points);
                // positive coordinates make bit order the numeric order
                prop_assert_eq!(keys(t), set.iter().copied().collect::<Vec<_>>());
            }
            prop_assert_eq!(out.report.users_kept, want.len() as u64);
            prop_assert_eq!(out.report.read, pings.len() as u64);
            Ok(())
        })
    }

    pub fn cleaning_is_idempotent_through_the_track_file(cases: u32) -> Outcome {
        run(cases, raw_pings(), |pings| {
            let cfg = CleanConfig::default();
            let out = clean_tracks(&pings, &cfg);
            let mut buf = Vec::new();
            write_tracks(&mut buf, &out.tracks).unwrap();
            let back = read_tracks(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &out.tracks);
            prop_assert_eq!(reclean_tracks(&back, cfg.min_points), out.tracks);
            Ok(())
        })
    }

    pub fn input_order_does_not_matter(cases: u32) -> Outcome {
        run(cases, (raw_pings(), any::<u64>()), |(pings, seed)| {
            let cfg = CleanConfig::default();
            let a = clean_tracks(&pings, &cfg);
            let b = clean_tracks(&shuffled(&pings, seed), &cfg);
            prop_assert_eq!(a, b);
            Ok(())
        })
    }

    pub fn worker_count_does_not_matter(cases: u32) -> Outcome {
        run(cases, raw_pings(), |pings| {
            let cfg = CleanConfig::default();
            let a = pool(1).install(|| clean_tracks(&pings, &cfg));
            let b = pool(4).install(|| clean_tracks(&pings, &cfg));
            prop_assert_eq!(a, b);
            Ok(())
        })
    }

    pub fn northing_increases_with_latitude(cases: u32) -> Outcome {
        run(
            cases,
            (0.001f64..83.9, 1e-6f64..0.1, -84.0f64..-78.0),
            |(lat, d, lon)| {
                let (_, n1) = project_wgs84_to_utm17n(lat, lon).unwrap();
                let (_, n2) = project_wgs84_to_utm17n((lat + d).min(84.0), lon).unwrap();
                prop_assert!(n2 > n1, "{n1} {n2}");
                Ok(())
            },
        )
    }

    pub fn easting_increases_with_longitude(cases: u32) -> Outcome {
        run(
            cases,
            (0.001f64..83.999, -84.0f64..-78.1, 1e-6f64..0.1),
            |(lat, lon, d)| {
                let (e1, _) = project_wgs84_to_utm17n(lat, lon).unwrap();
                let (e2, _) = project_wgs84_to_utm17n(lat, lon + d).unwrap();
                prop_assert!(e2 > e1, "{e1} {e2}");
                Ok(())
            },
        )
    }
}

pub mod zones {
    use super::*;
    use evacmob::geometry::buffer_ring;
    use geo::{Area, Coord, LineString, Polygon};

    const RADIUS: f64 = 7_500.0;

    fn square_distance(e: f64, n: f64, min_e: f64, min_n: f64, side: f64) -> f64 {
        let dx = (min_e - e).max(e - (min_e + side)).max(0.0);
        let dy = (min_n - n).max(n - (min_n + side)).max(0.0);
        dx.hypot(dy)
    }

    pub fn locate_partitions_the_plane(cases: u32) -> Outcome {
        run(
            cases,
            (310_000.0f64..375_000.0, 3_060_000.0f64..3_105_000.0),
            |(e, n)| {
                let zm = zonemap();
                let class = zm.locate(e, n);
                let zones = default_zones();
                let d = zones
                    .iter()
                    .map(|z| square_distance(e, n, z.min_e, z.min_n, z.side_m))
                    .fold(f64::INFINITY, f64::min);
                let inside = zones.iter().find(|z| {
                    e > z.min_e + 0.01
                        && e < z.min_e + z.side_m - 0.01
                        && n > z.min_n + 0.01
                        && n < z.min_n + z.side_m - 0.01
                });
                if let Some(z) = inside {
                    let want = if z.mandatory.is_some() {
                        ZoneClass::Mandatory
                    } else {
                        ZoneClass::Voluntary
                    };
                    prop_assert_eq!(class, want);
                } else if d > 0.01 && d < RADIUS - 1.0 {
                    prop_assert_eq!(class, ZoneClass::Buffer);
                } else if d > RADIUS + 1.0 {
                    prop_assert_eq!(class, ZoneClass::Outside);
                }
                // never buffer inside an evacuation polygon
                if zm.in_evacuation_zone(e, n) {
                    prop_assert!(class.is_evacuation_zone());
                }
                prop_assert_eq!(zm.locate(e, n), class);
                prop_assert_eq!(zm.place(e, n), zm.place(e, n));
                Ok(())
            },
        )
    }

    pub fn disc_dilation_area(cases: u32) -> Outcome {
        run(
            cases,
            (50.0f64..20_000.0, 200_000.0f64..800_000.0, 2_700_000.0f64..3_400_000.0),
            |(r, cx, cy)| {
                let pts: Vec<Coord<f64>> = (0..=360)
                    .map(|i| {
                        let a = (i % 360) as f64 * std::f64::consts::TAU / 360.0;
                        Coord {
                            x: cx + r * a.cos(),
                            y: cy + r * a.sin(),
                        }
                    })
                    .collect();
                let ring = buffer_ring(&[Polygon::new(LineString::new(pts), vec![])], RADIUS, 1.0);
                let area: f64 = ring.iter().map(|p| p.unsigned_area()).sum();
                let want = std::f64::consts::PI * ((r + RADIUS).powi(2) - r * r);
                prop_assert!((area - want).abs() / want < 0.005, "{area} vs {want}");
                Ok(())
            },
        )
    }
}

pub mod home {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    enum Night {
        Home,
        Other,
        Missing,
    }

    #[derive(Debug, Clone)]
    struct Plan {
        home: (f64, f64),
        nights: Vec<Night>,
        step_min: i64,
        weekend_away: bool,
        jitter: Vec<(i8, i8)>,
    }

    fn plan() -> impl Strategy<Value = Plan> {
        (
            (15_000i64..20_000, 150_000i64..155_000),
            prop::collection::vec(
                prop_oneof![3 => Just(Night::Home), 2 => Just(Night::Other), 1 => Just(Night::Missing)],
                22,
            ),
            10i64..=60,
            any::<bool>(),
            prop::collection::vec((-19i8..=19, -19i8..=19), 16),
        )
            .prop_map(|((ce, cn), nights, step_min, weekend_away, jitter)| Plan {
                // the centre of a 20 m cell, in half-metre units
                home: (ce as f64 * 20.0 + 10.0, cn as f64 * 20.0 + 10.0),
                nights,
                step_min,
                weekend_away,
                jitter,
            })
    }

    fn track(plan: &Plan, clock: &LocalClock) -> UserTrack {
        let (he, hn) = plan.home;
        let other = (he + 300.0, hn);
        let work = (he + 5_000.0, hn);
        let weekend = (he, hn + 8_000.0);
        let step = plan.step_min * 60;
        let mut pings = Vec::new();
        let mut k = 0usize;
        let mut at = |t: i64, (e, n): (f64, f64), pings: &mut Vec<CleanPing>| {
            let (je, jn) = plan.jitter[k % plan.jitter.len()];
            k += 1;
            pings.push(CleanPing {
                timestamp: t,
                easting: e + je as f64 * 0.5,
                northing: n + jn as f64 * 0.5,
            });
        };
        for (i, night) in plan.nights.iter().enumerate() {
            let d = date(9, 1 + i as u32);
            let day0 = clock.date_start(d);
            let is_weekend = matches!(
                chrono::Datelike::weekday(&d),
                chrono::Weekday::Sat | chrono::Weekday::Sun
            );
            let day_place = if is_weekend && plan.weekend_away { weekend } else { work };
            let mut t = day0 + 6 * 3600;
            while t < day0 + 20 * 3600 {
                at(t, day_place, &mut pings);
                t += step;
            }
            let place = match night {
                Night::Home => Some(plan.home),
                Night::Other => Some(other),
                Night::Missing => None,
            };
            if let Some(p) = place {
                let mut t = day0 + 20 * 3600;
                while t < day0 + 30 * 3600 {
                    at(t, p, &mut pings);
                    t += step;
                }
            }
        }
        UserTrack {
            user_id: "u".into(),
            pings,
        }
    }

    fn shifted(t: &UserTrack) -> UserTrack {
        UserTrack {
            user_id: t.user_id.clone(),
            pings: t
                .pings
                .iter()
                .map(|p| CleanPing {
                    timestamp: p.timestamp,
                    easting: p.easting + 20.0,
                    northing: p.northing + 20.0,
                })
                .collect(),
        }
    }

    pub fn thresholds_and_night_rule(cases: u32) -> Outcome {
        run(cases, plan(), |plan| {
            let (clock, cfg) = (clock(), HomeConfig::default());
            let t = track(&plan, &clock);
            let home_nights = plan.nights.iter().filter(|n| **n == Night::Home).count() as u32;
            let other_nights = plan.nights.iter().filter(|n| **n == Night::Other).count() as u32;
            let rec = detect_home(&t, &cfg, &clock);
            if let Some(r) = &rec {
                match r.method {
                    HomeMethod::Night => prop_assert!(r.support >= cfg.min_nights as i64),
                    HomeMethod::Weekend => prop_assert!(r.support >= cfg.min_weekend_s),
                }
            }
            if home_nights.max(other_nights) >= cfg.min_nights {
                let r = rec.expect("night rule satisfied");
                prop_assert_eq!(r.method, HomeMethod::Night);
                let home_cell = cell_of(plan.home.0, plan.home.1, cfg.grid_m);
                let other_cell = cell_of(plan.home.0 + 300.0, plan.home.1, cfg.grid_m);
                if home_nights > other_nights {
                    prop_assert_eq!(r.cell, home_cell);
                    prop_assert_eq!(r.support, home_nights as i64);
                } else if other_nights > home_nights {
                    prop_assert_eq!(r.cell, other_cell);
                }
            } else {
                prop_assert!(rec.map_or(true, |r| r.method == HomeMethod::Weekend));
            }
            Ok(())
        })
    }

    pub fn translation_shifts_the_cell(cases: u32) -> Outcome {
        run(cases, plan(), |plan| {
            let (clock, cfg) = (clock(), HomeConfig::default());
            let t = track(&plan, &clock);
            let a = detect_home(&t, &cfg, &clock);
            let b = detect_home(&shifted(&t), &cfg, &clock);
            match (a, b) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    prop_assert_eq!(
                        b.cell,
                        GridCell {
                            ix: a.cell.ix + 1,
                            iy: a.cell.iy + 1
                        }
                    );
                    prop_assert_eq!(a.method, b.method);
                    prop_assert_eq!(a.support, b.support);
                }
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
            Ok(())
        })
    }

    pub fn ping_order_does_not_matter(cases: u32) -> Outcome {
        run(cases, (plan(), any::<u64>()), |(plan, seed)| {
            let (clock, cfg) = (clock(), HomeConfig::default());
            let t = track(&plan, &clock);
            let mut pings = shuffled(&t.pings, seed);
            normalize_pings(&mut pings);
            let permuted = UserTrack {
                user_id: t.user_id.clone(),
                pings,
            };
            prop_assert_eq!(detect_home(&t, &cfg, &clock), detect_home(&permuted, &cfg, &clock));
            Ok(())
        })
    }
}

pub mod staypoints {
    use super::*;

    /// Runs of pings near one spot (`jitter` metres) or scattered moves.
    fn track() -> impl Strategy<Value = UserTrack> {
        prop::collection::vec((any::<bool>(), 1usize..15, 0.0f64..90.0, 10i64..400), 1..25)
            .prop_flat_map(|segs| {
                let n: usize = segs.iter().map(|s| s.1).sum();
                (Just(segs), prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n))
            })
            .prop_map(|(segs, unit)| {
                let mut pings = Vec::new();
                let (mut t, mut e, mut n) = (1_663_000_000i64, 400_000.0, 3_000_000.0);
                let mut k = 0;
                for (stay, count, jitter, dt) in segs {
                    for _ in 0..count {
                        let (ux, uy) = unit[k];
                        k += 1;
                        t += dt;
                        if stay {
                            pings.push(CleanPing {
                                timestamp: t,
                                easting: e + ux * jitter,
                                northing: n + uy * jitter,
                            });
                        } else {
                            e += 150.0 + ux * 500.0;
                            n += uy * 500.0;
                            pings.push(CleanPing {
                                timestamp: t,
                                easting: e,
                                northing: n,
                            });
                        }
                    }
                    e += 1_000.0;
                }
                UserTrack {
                    user_id: "u".into(),
                    pings,
                }
            })
    }

    /// Replays the pass over an activity's members, checking each joined
    /// within the radius of the centroid at that moment.
    fn members_within_radius(track: &UserTrack, a: &Activity, radius: f64) -> bool {
        let members: Vec<&CleanPing> = track
            .pings
            .iter()
            .filter(|p| p.timestamp >= a.start && p.timestamp <= a.end)
            .collect();
        if members.len() != a.n_points as usize {
            return false;
        }
        let (mut se, mut sn) = (members[0].easting, members[0].northing);
        for (i, p) in members.iter().enumerate().skip(1) {
            let (ce, cn) = (se / i as f64, sn / i as f64);
            if (p.easting - ce).hypot(p.northing - cn) >= radius {
                return false;
            }
            se += p.easting;
            sn += p.northing;
        }
        let k = members.len() as f64;
        (se / k - a.centroid_e).abs() < 1e-6 && (sn / k - a.centroid_n).abs() < 1e-6
    }

    pub fn activities_are_long_disjoint_and_bounded(cases: u32) -> Outcome {
        run(cases, track(), |track| {
            let cfg = StayPointConfig::default();
            let acts = extract_activities(&track, &cfg);
            prop_assert!(acts.len() <= track.pings.len());
            for a in &acts {
                prop_assert!(a.duration() >= cfg.min_duration_s);
                prop_assert!(a.n_points >= 1);
                prop_assert!(members_within_radius(&track, a, cfg.radius_m), "{a:?}");
            }
            for w in acts.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            Ok(())
        })
    }

    pub fn resuming_from_a_checkpoint_matches_a_whole_pass(cases: u32) -> Outcome {
        run(cases, (track(), any::<prop::sample::Index>()), |(track, cut)| {
            let cfg = StayPointConfig::default();
            let whole = extract_activities(&track, &cfg);
            let cut = cut.index(track.pings.len() + 1);
            let mut ex = StayPointExtractor::new("u", cfg);
            let mut out: Vec<Activity> = track.pings[..cut].iter().filter_map(|p| ex.push(p)).collect();
            let mut resumed = ex.clone();
            drop(ex);
            out.extend(track.pings[cut..].iter().filter_map(|p| resumed.push(p)));
            out.extend(resumed.finish());
            prop_assert_eq!(out, whole);
            Ok(())
        })
    }
}

pub mod classify {
    use super::*;
    use evacmob::zones::{Zone, ZoneMap};

    const SHELTER: (f64, f64) = (270_000.0, 3_060_000.0);

    #[derive(Debug, Clone)]
    struct User {
        home: (f64, f64),
        /// (place, duration h, gap h)
        days: Vec<(u8, i64, i64)>,
    }

    fn home_point() -> impl Strategy<Value = (f64, f64)> {
        prop_oneof![
            (0usize..3, 100.0f64..3_900.0, 100.0f64..3_900.0)
                .prop_map(|(z, x, y)| (330_000.0 + z as f64 * 10_000.0 + x, 3_080_000.0 + y)),
            (200.0f64..7_000.0, 100.0f64..3_900.0).prop_map(|(u, y)| (330_000.0 - u, 3_080_000.0 + y)),
            (300.0f64..6_500.0, 100.0f64..3_900.0).prop_map(|(u, x)| (340_000.0 + x, 3_084_000.0 + u)),
        ]
    }

    fn user() -> impl Strategy<Value = User> {
        (
            home_point(),
            prop::collection::vec((0u8..6, 1i64..40, prop_oneof![6 => 0i64..3, 1 => 10i64..60]), 3..16),
        )
            .prop_map(|(home, days)| User { home, days })
    }

    fn place(u: &User, p: u8) -> (f64, f64) {
        match p {
            0 | 1 => u.home,
            2 => (332_000.0, 3_082_000.0),
            3 => (342_000.0, 3_082_000.0),
            4 => (326_000.0, 3_082_000.0),
            _ => SHELTER,
        }
    }

    fn activities(id: &str, u: &User, cfg: &ClassifyConfig) -> Vec<Activity> {
        let mut t = cfg.window.start - 36 * 3600;
        u.days
            .iter()
            .map(|&(p, dur, gap)| {
                let (e, n) = place(u, p);
                let a = Activity {
                    user_id: id.into(),
                    centroid_e: e,
                    centroid_n: n,
                    start: t,
                    end: t + dur * 3600,
                    n_points: 10,
                };
                t = a.end + gap * 3600 + 600;
                a
            })
            .collect()
    }

    fn home_record(id: &str, u: &User, cfg: &ClassifyConfig) -> HomeRecord {
        HomeRecord {
            user_id: id.into(),
            cell: cell_of(u.home.0, u.home.1, cfg.grid_m),
            method: HomeMethod::Night,
            support: 10,
        }
    }

    fn delayed(zm: &ZoneMap, zone: usize, delay: i64) -> ZoneMap {
        let mut zones: Vec<Zone> = zm.zones.clone();
        for o in &mut zones[zone].orders {
            o.time += delay;
        }
        ZoneMap::new(zones, &BufferConfig::default()).unwrap()
    }

    fn allowed_under_delay(before: EvacClass, after: EvacClass) -> bool {
        use EvacClass::*;
        before == after
            || (after == SelfEvacuee && matches!(before, VoluntaryEvacuee | MandatoryEvacuee | ShadowEvacuee))
            || (before == MandatoryEvacuee && after == VoluntaryEvacuee)
    }

    pub fn batch_partition_and_class_rules(cases: u32) -> Outcome {
        run(
            cases,
            (prop::collection::vec(user(), 1..8), any::<u64>()),
            |(users, seed)| {
                let cfg = ClassifyConfig::default();
                let zm = zonemap();
                let ids: Vec<String> = (0..users.len()).map(|i| format!("u{i}")).collect();
                let homes: Vec<HomeRecord> = ids.iter().zip(&users).map(|(id, u)| home_record(id, u, &cfg)).collect();
                let acts: BTreeMap<String, Vec<Activity>> = ids
                    .iter()
                    .zip(&users)
                    .map(|(id, u)| (id.clone(), activities(id, u, &cfg)))
                    .collect();
                let (outcomes, report) = classify_all(&homes, &acts, zm, &cfg);
                prop_assert_eq!(outcomes.len(), users.len());
                prop_assert_eq!(report.outside_excluded, 0);
                let counts = GroupCounts::from_outcomes(outcomes.iter().map(|o| o.row()).collect::<Vec<_>>().iter());
                prop_assert_eq!(counts.total(), users.len() as u64);
                for o in &outcomes {
                    match o.home_zone {
                        ZoneClass::Buffer => prop_assert!(!matches!(
                            o.class,
                            EvacClass::VoluntaryEvacuee | EvacClass::MandatoryEvacuee
                        )),
                        ZoneClass::Voluntary | ZoneClass::Mandatory => {
                            prop_assert_ne!(o.class, EvacClass::ShadowEvacuee)
                        }
                        ZoneClass::Outside => prop_assert!(false, "outside home classified"),
                    }
                    prop_assert_eq!(o.departure.is_some(), o.class.is_evacuee());
                    if let Some(d) = o.departure {
                        prop_assert!(d >= cfg.window.start);
                    }
                    prop_assert_eq!(o.nights.len(), 7);
                }
                let (again, _) = classify_all(&shuffled(&homes, seed), &acts, zm, &cfg);
                prop_assert_eq!(again, outcomes);
                Ok(())
            },
        )
    }

    pub fn delaying_orders_only_moves_ordered_users_to_self(cases: u32) -> Outcome {
        run(cases, (user(), 0usize..3, 0i64..120), |(u, zone, delay_h)| {
            let cfg = ClassifyConfig::default();
            let zm = zonemap();
            let late = delayed(zm, zone, delay_h * 3600);
            let home = home_record("u", &u, &cfg);
            let acts = activities("u", &u, &cfg);
            let a = infer_outcome(&home, &acts, zm, &cfg).unwrap();
            let b = infer_outcome(&home, &acts, &late, &cfg).unwrap();
            prop_assert!(allowed_under_delay(a.class, b.class), "{:?} -> {:?}", a.class, b.class);
            prop_assert_eq!(a.departure, b.departure);
            Ok(())
        })
    }
}

pub mod metrics {
    use super::*;
    use evacmob::classify::OutcomeRow;
    use evacmob::time::Interval;

    fn counts() -> impl Strategy<Value = GroupCounts> {
        prop::array::uniform7(0u64..2_000_000).prop_map(GroupCounts)
    }

    fn outcomes() -> impl Strategy<Value = Vec<OutcomeRow>> {
        let cfg = ClassifyConfig::default();
        let (lo, hi) = (cfg.window.start - 86_400, cfg.window.end + 86_400);
        prop::collection::vec((0usize..7, lo..hi, 0usize..4), 0..200).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (c, dep, region))| {
                    let class = EvacClass::ALL[c];
                    OutcomeRow {
                        user_id: format!("u{i:04}"),
                        class,
                        departure_utc: class.is_evacuee().then_some(dep),
                        home_zone: ZoneClass::Mandatory,
                        nights_away: 0,
                        imputed_nights: 0,
                        region: format!("r{region}"),
                    }
                })
                .collect()
        })
    }

    fn waves() -> impl Strategy<Value = Vec<WaveWindow>> {
        let start = ClassifyConfig::default().window.start;
        prop::collection::vec((0i64..48, 1i64..48), 0..4).prop_map(move |spans| {
            let mut t = start;
            let n = spans.len();
            spans
                .into_iter()
                .enumerate()
                .map(|(i, (gap, len))| {
                    let s = t + gap * 3600;
                    t = s + len * 3600;
                    WaveWindow {
                        name: format!("w{i}"),
                        start: s,
                        end: (i + 1 < n).then_some(t),
                    }
                })
                .collect()
        })
    }

    pub fn rates_are_ordered_fractions(cases: u32) -> Outcome {
        run(cases, counts(), |c| {
            for d in [Denominator::All, Denominator::Categorized] {
                if let Ok(r) = rates("s", &c, d) {
                    prop_assert!(0.0 <= r.out_of_zone_rate);
                    prop_assert!(r.out_of_zone_rate <= r.overall_rate);
                    prop_assert!(r.overall_rate <= 1.0);
                }
            }
            Ok(())
        })
    }

    pub fn sampling_rates_are_fractions(cases: u32) -> Outcome {
        run(
            cases,
            (outcomes(), prop::collection::vec(0u64..1_000, 4)),
            |(rows, extra)| {
                let mut residents: BTreeMap<String, u64> = BTreeMap::new();
                for r in rows.iter().filter(|r| r.class != EvacClass::Uncategorized) {
                    *residents.entry(r.region.clone()).or_default() += 1;
                }
                let census: BTreeMap<String, u64> = (0..4)
                    .map(|i| {
                        let name = format!("r{i}");
                        let n = residents.get(&name).copied().unwrap_or(0) + extra[i];
                        (name, n)
                    })
                    .collect();
                let rep = sampling_rate(&rows, &census);
                for r in rep.regions.iter().chain([&rep.global]) {
                    prop_assert!((0.0..=1.0).contains(&r.rate), "{r:?}");
                }
                Ok(())
            },
        )
    }

    pub fn curve_and_waves_account_for_every_evacuee(cases: u32) -> Outcome {
        run(cases, (outcomes(), waves()), |(rows, w)| {
            let cfg = ClassifyConfig::default();
            let curve = response_curve(&rows, Interval::new(cfg.window.start, cfg.window.end), &cfg.clock);
            let counts = GroupCounts::from_outcomes(&rows);
            for c in EvacClass::ALL {
                let want = if c.is_evacuee() { counts.get(c) } else { 0 };
                prop_assert_eq!(curve.class_total(c), want);
            }
            let s = wave_summary(&curve, &w).unwrap();
            prop_assert_eq!(s.total(), counts.evacuees());
            Ok(())
        })
    }
}

pub mod synth {
    use super::*;
    use evacmob::pipeline::{run_in_memory, Params};
    use evacmob::synth::scenario_buckets;

    pub fn same_seed_same_stream_and_outcomes(cases: u32) -> Outcome {
        run(cases, (any::<u64>(), 0usize..7, 0.0f64..0.5), |(seed, class, gap)| {
            let p = Params::default();
            let cfg = SynthConfig {
                gap_prob: gap,
                noise_sigma_m: 5.0,
                ..SynthConfig::with_counts(seed, &[(EvacClass::ALL[class], 1)])
            };
            let a = generate_scenario(&cfg, &p.classify, &p.buffer).unwrap();
            let b = generate_scenario(&cfg, &p.classify, &p.buffer).unwrap();
            prop_assert_eq!(&a.agents, &b.agents);
            prop_assert_eq!(a.agents[0].pings(), b.agents[0].pings());
            let ra = run_in_memory(scenario_buckets(&a), &a.zonemap, &p);
            let rb = run_in_memory(scenario_buckets(&b), &b.zonemap, &p);
            prop_assert_eq!(ra, rb);
            Ok(())
        })
    }
}

/// Every invariant, by module.
#[allow(dead_code)] // run as a whole by the acceptance target
pub const SUITE: &[(&str, fn(u32) -> Outcome)] = &[
    (
        "ingest::survivors_match_filter_oracle",
        ingest::survivors_match_filter_oracle,
    ),
    (
        "ingest::cleaning_is_idempotent_through_the_track_file",
        ingest::cleaning_is_idempotent_through_the_track_file,
    ),
    (
        "ingest::input_order_does_not_matter",
        ingest::input_order_does_not_matter,
    ),
    (
        "ingest::worker_count_does_not_matter",
        ingest::worker_count_does_not_matter,
    ),
    (
        "ingest::northing_increases_with_latitude",
        ingest::northing_increases_with_latitude,
    ),
    (
        "ingest::easting_increases_with_longitude",
        ingest::easting_increases_with_longitude,
    ),
    ("zones::locate_partitions_the_plane", zones::locate_partitions_the_plane),
    ("zones::disc_dilation_area", zones::disc_dilation_area),
    ("home::thresholds_and_night_rule", home::thresholds_and_night_rule),
    ("home::translation_shifts_the_cell", home::translation_shifts_the_cell),
    ("home::ping_order_does_not_matter", home::ping_order_does_not_matter),
    (
        "staypoints::activities_are_long_disjoint_and_bounded",
        staypoints::activities_are_long_disjoint_and_bounded,
    ),
    (
        "staypoints::resuming_from_a_checkpoint_matches_a_whole_pass",
        staypoints::resuming_from_a_checkpoint_matches_a_whole_pass,
    ),
    (
        "classify::batch_partition_and_class_rules",
        classify::batch_partition_and_class_rules,
    ),
    (
        "classify::delaying_orders_only_moves_ordered_users_to_self",
        classify::delaying_orders_only_moves_ordered_users_to_self,
    ),
    (
        "metrics::rates_are_ordered_fractions",
        metrics::rates_are_ordered_fractions,
    ),
    (
        "metrics::sampling_rates_are_fractions",
        metrics::sampling_rates_are_fractions,
    ),
    (
        "metrics::curve_and_waves_account_for_every_evacuee",
        metrics::curve_and_waves_account_for_every_evacuee,
    ),
    (
        "synth::same_seed_same_stream_and_outcomes",
        synth::same_seed_same_stream_and_outcomes,
    ),
];
