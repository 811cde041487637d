//! Raw ping parsing and per-user track cleaning.
//!
//! Records are parsed into per-user buckets, then each user is cleaned
//! independently: accuracy filter, projection to UTM 17N, exact-duplicate
//! removal, a total sort on `(timestamp, easting, northing)`, and the
//! minimum-points cut. Output ordering is by `user_id`, so results do not
//! depend on input order or on the rayon pool size.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::projection::project_wgs84_to_utm17n;

/// Upper bound on the number of per-record messages kept in a parse report.
const MAX_REPORTED_ERRORS: usize = 100;

pub const TRACK_FORMAT: &str = "evacmob.tracks";
pub const TRACK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{malformed} of {records} records malformed (more than half)")]
    TooManyMalformed { malformed: u64, records: u64 },
    #[error("track file: {0}")]
    TrackFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyClass {
    High,
    MediumHigh,
    Other,
}

impl AccuracyClass {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "high" => Some(Self::High),
            "medium_high" => Some(Self::MediumHigh),
            "other" => Some(Self::Other),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::High => "high",
            Self::MediumHigh => "medium_high",
            Self::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPing {
    pub user_id: String,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub accuracy: AccuracyClass,
}

/// A ping in projected coordinates. The owning user lives on [`UserTrack`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanPing {
    pub timestamp: i64,
    pub easting: f64,
    pub northing: f64,
}

impl CleanPing {
    fn sort_key_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.timestamp
            .cmp(&other.timestamp)
            .then(self.easting.total_cmp(&other.easting))
            .then(self.northing.total_cmp(&other.northing))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTrack {
    pub user_id: String,
    pub pings: Vec<CleanPing>,
}

pub type TrackSet = BTreeMap<String, UserTrack>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PingFormat {
    Ndjson,
    Csv,
}

impl PingFormat {
    /// `.csv` is CSV, everything else is NDJSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Ndjson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordError {
    pub record: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseReport {
    pub records: u64,
    pub malformed: u64,
    pub errors: Vec<RecordError>,
}

impl ParseReport {
    fn malformed(&mut self, record: u64, message: String) {
        self.malformed += 1;
        if self.errors.len() < MAX_REPORTED_ERRORS {
            self.errors.push(RecordError { record, message });
        }
    }

    fn check(&self) -> Result<(), IngestError> {
        if self.malformed * 2 > self.records {
            return Err(IngestError::TooManyMalformed {
                malformed: self.malformed,
                records: self.records,
            });
        }
        Ok(())
    }
}

/// A borrowed, already validated record.
#[derive(Debug, Clone, Copy)]
pub struct PingRef<'a> {
    pub user_id: &'a str,
    pub timestamp: i64,
    pub lat: f64,
    pub lon: f64,
    pub accuracy: AccuracyClass,
}

impl PingRef<'_> {
    pub fn to_owned(&self) -> RawPing {
        RawPing {
            user_id: self.user_id.to_owned(),
            timestamp: self.timestamp,
            lat: self.lat,
            lon: self.lon,
            accuracy: self.accuracy,
        }
    }
}

#[derive(Deserialize)]
struct WireRecord<'a> {
    #[serde(borrow)]
    user_id: Cow<'a, str>,
    ts: i64,
    lat: f64,
    lon: f64,
    #[serde(borrow)]
    acc: Cow<'a, str>,
}

fn validate(rec: &WireRecord<'_>) -> Result<AccuracyClass, String> {
    if rec.user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if rec.ts <= 0 {
        return Err(format!("non-positive ts {}", rec.ts));
    }
    if !(-90.0..=90.0).contains(&rec.lat) {
        return Err(format!("lat {} out of range", rec.lat));
    }
    if !(-180.0..=180.0).contains(&rec.lon) {
        return Err(format!("lon {} out of range", rec.lon));
    }
    AccuracyClass::parse(&rec.acc).ok_or_else(|| format!("unknown acc {:?}", rec.acc))
}

/// Streams every well-formed record to `f`, skipping and counting the rest.
pub fn for_each_ping<R: Read>(
    reader: R,
    format: PingFormat,
    mut f: impl FnMut(PingRef<'_>),
) -> Result<ParseReport, IngestError> {
    let mut report = ParseReport::default();
    let mut emit = |report: &mut ParseReport, idx: u64, rec: Result<WireRecord<'_>, String>| match rec
        .and_then(|r| validate(&r).map(|acc| (r, acc)))
    {
        Ok((r, accuracy)) => f(PingRef {
            user_id: &r.user_id,
            timestamp: r.ts,
            lat: r.lat,
            lon: r.lon,
            accuracy,
        }),
        Err(msg) => report.malformed(idx, msg),
    };
    match format {
        PingFormat::Ndjson => {
            let mut reader = BufReader::with_capacity(1 << 16, reader);
            let mut line = Vec::with_capacity(256);
            loop {
                line.clear();
                if reader.read_until(b'\n', &mut line)? == 0 {
                    break;
                }
                let trimmed = line.trim_ascii();
                if trimmed.is_empty() {
                    continue;
                }
                report.records += 1;
                let idx = report.records;
                let rec = serde_json::from_slice::<WireRecord<'_>>(trimmed).map_err(|e| e.to_string());
                emit(&mut report, idx, rec);
            }
        }
        PingFormat::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .trim(csv::Trim::All)
                .flexible(true)
                .from_reader(reader);
            let headers = match rdr.headers() {
                Ok(h) => h.clone(),
                Err(e) if e.is_io_error() => return Err(into_io(e)),
                // An empty file has no header row.
                Err(_) => return Ok(report),
            };
            let mut record = csv::StringRecord::new();
            loop {
                match rdr.read_record(&mut record) {
                    Ok(false) => break,
                    Ok(true) => {
                        report.records += 1;
                        let idx = report.records;
                        let rec = record
                            .deserialize::<WireRecord<'_>>(Some(&headers))
                            .map_err(|e| e.to_string());
                        emit(&mut report, idx, rec);
                    }
                    Err(e) if e.is_io_error() => return Err(into_io(e)),
                    Err(e) => {
                        report.records += 1;
                        let idx = report.records;
                        report.malformed(idx, e.to_string());
                    }
                }
            }
        }
    }
    report.check()?;
    Ok(report)
}

fn into_io(e: csv::Error) -> IngestError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => IngestError::Io(io),
        other => IngestError::TrackFile(format!("{other:?}")),
    }
}

/// Parses a whole stream into owned records, in input order.
pub fn parse_pings<R: Read>(reader: R, format: PingFormat) -> Result<(Vec<RawPing>, ParseReport), IngestError> {
    let mut out = Vec::new();
    let report = for_each_ping(reader, format, |p| out.push(p.to_owned()))?;
    Ok((out, report))
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Observation {
    timestamp: i64,
    lat: f64,
    lon: f64,
    accuracy: AccuracyClass,
}

/// Raw records grouped by user, prior to cleaning.
#[derive(Debug, Default, Clone)]
pub struct PingBuckets {
    users: HashMap<String, Vec<Observation>>,
    read: u64,
    malformed: u64,
}

impl PingBuckets {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: PingRef<'_>) {
        let obs = Observation {
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            accuracy: p.accuracy,
        };
        match self.users.get_mut(p.user_id) {
            Some(v) => v.push(obs),
            None => {
                self.users.insert(p.user_id.to_owned(), vec![obs]);
            }
        }
    }

    pub fn push_raw(&mut self, p: &RawPing) {
        self.push(PingRef {
            user_id: &p.user_id,
            timestamp: p.timestamp,
            lat: p.lat,
            lon: p.lon,
            accuracy: p.accuracy,
        });
    }

    /// Like [`push`](Self::push), also counting the record as read.
    pub fn push_counted(&mut self, p: PingRef<'_>) {
        self.read += 1;
        self.push(p);
    }

    /// Parses one stream into a fresh bucket set.
    pub fn from_reader<R: Read>(reader: R, format: PingFormat) -> Result<Self, IngestError> {
        let mut buckets = Self::new();
        let report = for_each_ping(reader, format, |p| buckets.push(p))?;
        buckets.read = report.records;
        buckets.malformed = report.malformed;
        Ok(buckets)
    }

    pub fn merge(&mut self, other: PingBuckets) {
        self.read += other.read;
        self.malformed += other.malformed;
        for (user, obs) in other.users {
            self.users.entry(user).or_default().extend(obs);
        }
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }
}

impl<'a> FromIterator<&'a RawPing> for PingBuckets {
    fn from_iter<I: IntoIterator<Item = &'a RawPing>>(iter: I) -> Self {
        let mut b = PingBuckets::new();
        for p in iter {
            b.read += 1;
            b.push_raw(p);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanConfig {
    pub min_points: usize,
    pub accuracy_keep: Vec<AccuracyClass>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            min_points: 150,
            accuracy_keep: vec![AccuracyClass::High, AccuracyClass::MediumHigh],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub read: u64,
    pub malformed: u64,
    pub low_accuracy: u64,
    pub out_of_band: u64,
    pub duplicates: u64,
    pub users_dropped: u64,
    pub users_kept: u64,
    pub pings_kept: u64,
}

impl CleaningReport {
    fn add(&mut self, o: &CleaningReport) {
        self.read += o.read;
        self.malformed += o.malformed;
        self.low_accuracy += o.low_accuracy;
        self.out_of_band += o.out_of_band;
        self.duplicates += o.duplicates;
        self.users_dropped += o.users_dropped;
        self.users_kept += o.users_kept;
        self.pings_kept += o.pings_kept;
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanOutput {
    pub tracks: TrackSet,
    pub report: CleaningReport,
}

/// Sorts by `(timestamp, easting, northing)` and drops exact duplicates.
/// Returns the number of duplicates removed.
pub fn normalize_pings(pings: &mut Vec<CleanPing>) -> u64 {
    pings.sort_unstable_by(CleanPing::sort_key_cmp);
    let before = pings.len();
    pings.dedup_by(|a, b| a.sort_key_cmp(b).is_eq());
    (before - pings.len()) as u64
}

fn clean_user(user_id: String, obs: Vec<Observation>, cfg: &CleanConfig) -> (Option<UserTrack>, CleaningReport) {
    let mut report = CleaningReport::default();
    let mut pings = Vec::with_capacity(obs.len());
    for o in obs {
        if !cfg.accuracy_keep.contains(&o.accuracy) {
            report.low_accuracy += 1;
            continue;
        }
        match project_wgs84_to_utm17n(o.lat, o.lon) {
            Ok((easting, northing)) => pings.push(CleanPing {
                timestamp: o.timestamp,
                easting,
                northing,
            }),
            Err(_) => report.out_of_band += 1,
        }
    }
    report.duplicates = normalize_pings(&mut pings);
    if pings.len() < cfg.min_points {
        report.users_dropped = 1;
        (None, report)
    } else {
        report.users_kept = 1;
        report.pings_kept = pings.len() as u64;
        (Some(UserTrack { user_id, pings }), report)
    }
}

/// Cleans every user in `buckets` on the current rayon pool.
pub fn clean_buckets(buckets: PingBuckets, cfg: &CleanConfig) -> CleanOutput {
    let PingBuckets { users, read, malformed } = buckets;
    let mut users: Vec<_> = users.into_iter().collect();
    users.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let results: Vec<_> = users
        .into_par_iter()
        .map(|(user, obs)| clean_user(user, obs, cfg))
        .collect();
    let mut out = CleanOutput::default();
    out.report.read = read;
    out.report.malformed = malformed;
    for (track, report) in results {
        out.report.add(&report);
        if let Some(t) = track {
            out.tracks.insert(t.user_id.clone(), t);
        }
    }
    out
}

pub fn clean_tracks(pings: &[RawPing], cfg: &CleanConfig) -> CleanOutput {
    clean_buckets(pings.iter().collect(), cfg)
}

/// Re-applies the post-projection cleaning steps to already projected tracks.
pub fn reclean_tracks(tracks: &TrackSet, min_points: usize) -> TrackSet {
    tracks
        .values()
        .filter_map(|t| {
            let mut pings = t.pings.clone();
            normalize_pings(&mut pings);
            (pings.len() >= min_points).then(|| {
                (
                    t.user_id.clone(),
                    UserTrack {
                        user_id: t.user_id.clone(),
                        pings,
                    },
                )
            })
        })
        .collect()
}

/// Parses and cleans a set of input files; files are parsed in parallel.
pub fn ingest_files(paths: &[impl AsRef<Path> + Sync], cfg: &CleanConfig) -> Result<CleanOutput, IngestError> {
    let parsed: Vec<Result<PingBuckets, IngestError>> = paths
        .par_iter()
        .map(|p| {
            let p = p.as_ref();
            let file = std::fs::File::open(p)?;
            PingBuckets::from_reader(file, PingFormat::from_path(p))
        })
        .collect();
    let mut all = PingBuckets::new();
    for b in parsed {
        all.merge(b?);
    }
    Ok(clean_buckets(all, cfg))
}

#[derive(Serialize, Deserialize)]
struct TrackHeader {
    format: String,
    version: u32,
}

#[derive(Serialize)]
struct TrackLineOut<'a> {
    user_id: &'a str,
    pings: Vec<(i64, f64, f64)>,
}

#[derive(Deserialize)]
struct TrackLineIn {
    user_id: String,
    pings: Vec<(i64, f64, f64)>,
}

/// Writes tracks as versioned NDJSON: a header line, then one user per line
/// with `pings` as `[timestamp, easting, northing]` triples.
pub fn write_tracks<W: Write>(mut w: W, tracks: &TrackSet) -> std::io::Result<()> {
    let header = TrackHeader {
        format: TRACK_FORMAT.into(),
        version: TRACK_FORMAT_VERSION,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for t in tracks.values() {
        let line = TrackLineOut {
            user_id: &t.user_id,
            pings: t.pings.iter().map(|p| (p.timestamp, p.easting, p.northing)).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_tracks<R: Read>(r: R) -> Result<TrackSet, IngestError> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .ok_or_else(|| IngestError::TrackFile("missing header".into()))??;
    let header: TrackHeader = serde_json::from_str(&header).map_err(|e| IngestError::TrackFile(e.to_string()))?;
    if header.format != TRACK_FORMAT || header.version != TRACK_FORMAT_VERSION {
        return Err(IngestError::TrackFile(format!(
            "unsupported format {} v{}",
            header.format, header.version
        )));
    }
    let mut out = TrackSet::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: TrackLineIn = serde_json::from_str(&line).map_err(|e| IngestError::TrackFile(e.to_string()))?;
        let pings = t
            .pings
            .into_iter()
            .map(|(timestamp, easting, northing)| CleanPing {
                timestamp,
                easting,
                northing,
            })
            .collect();
        out.insert(
            t.user_id.clone(),
            UserTrack {
                user_id: t.user_id,
                pings,
            },
        );
    }
    Ok(out)
}
