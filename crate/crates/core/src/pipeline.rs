//! Stage wiring, in memory and over artifact files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classify::{
    classify_all, group_activities, ClassifyConfig, ClassifyReport, EvacClass, OutcomeRow, UserOutcome,
};
use crate::config::{ConfigError, PipelineConfig};
use crate::home::{infer_homes, GridCell, HomeConfig, HomeMethod, HomeRecord, HomeReport};
use crate::ingest::{
    clean_buckets, ingest_files, read_tracks, write_tracks, CleanConfig, CleaningReport, IngestError, PingBuckets,
    TrackSet,
};
use crate::metrics::{
    counts_by_region, pearson, percent_1dp, rates, response_curve, sampling_rate, wave_summary, MetricsError,
};
use crate::staypoints::{extract_all, Activity, StayPointConfig};
use crate::synth::{
    census, generate_scenario, inferred_labels, read_truth_csv, score_recovery, write_census_csv, write_pings_ndjson,
    write_truth_csv, SynthError,
};
use crate::time::{format_utc, LocalClock};
use crate::zones::{load_zonemap, BufferConfig, ZoneError, ZoneMap};

/// Resolved module parameters for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub clock: LocalClock,
    pub clean: CleanConfig,
    pub buffer: BufferConfig,
    pub home: HomeConfig,
    pub staypoints: StayPointConfig,
    pub classify: ClassifyConfig,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            clock: LocalClock::eastern_daylight(),
            clean: CleanConfig::default(),
            buffer: BufferConfig::default(),
            home: HomeConfig::default(),
            staypoints: StayPointConfig::default(),
            classify: ClassifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InMemoryRun {
    pub outcomes: Vec<UserOutcome>,
    pub cleaning: CleaningReport,
    pub homes: HomeReport,
    pub classify: ClassifyReport,
    pub activities: usize,
}

/// Cleans, infers homes and activities, then classifies, without touching disk.
pub fn run_in_memory(buckets: PingBuckets, zonemap: &ZoneMap, p: &Params) -> InMemoryRun {
    let cleaned = clean_buckets(buckets, &p.clean);
    let (homes, home_report) = infer_homes(&cleaned.tracks, &p.home, &p.clock);
    let activities = extract_all(&cleaned.tracks, &p.staypoints);
    let n_activities = activities.len();
    let grouped = group_activities(activities);
    let (outcomes, classify_report) = classify_all(&homes, &grouped, zonemap, &p.classify);
    InMemoryRun {
        outcomes,
        cleaning: cleaned.report,
        homes: home_report,
        classify: classify_report,
        activities: n_activities,
    }
}

// ---- file-based stages ----

pub const TRACKS: &str = "tracks.ndjson";
pub const CLEANING_REPORT: &str = "cleaning_report.json";
pub const HOMES: &str = "homes.csv";
pub const HOME_REPORT: &str = "home_report.json";
pub const ACTIVITIES: &str = "activities.csv";
pub const OUTCOMES: &str = "outcomes.csv";
pub const NIGHTS: &str = "nights.csv";
pub const CLASSIFY_REPORT: &str = "classify_report.json";
pub const RATES: &str = "rates.csv";
pub const CURVE: &str = "curve.csv";
pub const WAVES: &str = "waves.csv";
pub const SAMPLING: &str = "sampling.csv";
pub const CORRELATION: &str = "correlation.csv";
pub const REPORT_DIR: &str = "report";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const RECOVERY: &str = "recovery.json";

const METRIC_FILES: [&str; 5] = [RATES, CURVE, WAVES, SAMPLING, CORRELATION];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", .path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Zones(#[from] ZoneError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::MissingArtifact(_) => 2,
            Self::Config(ConfigError::Invalid(_)) => 3,
            _ => 1,
        }
    }

    /// Machine-readable form for stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let kind = match self {
            Self::MissingArtifact(_) => "missing_artifact",
            Self::Config(ConfigError::Invalid(_)) => "invalid_config",
            Self::Config(_) => "config_io",
            Self::Io { .. } => "io",
            Self::Format { .. } => "format",
            Self::Ingest(_) => "ingest",
            Self::Zones(_) => "zones",
            Self::Synth(_) => "synth",
            Self::Metrics(_) => "metrics",
        };
        let mut v = serde_json::json!({
            "error": kind,
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        match self {
            Self::MissingArtifact(p) => v["missing"] = p.display().to_string().into(),
            Self::Config(ConfigError::Invalid(fields)) => {
                v["fields"] = serde_json::to_value(fields).expect("field errors serialize")
            }
            _ => {}
        }
        v
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

fn format_err(path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Format {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn open_upstream(path: &Path) -> Result<BufReader<File>> {
    match File::open(path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::MissingArtifact(path.to_owned())),
        Err(e) => Err(io_err(path)(e)),
    }
}

fn read_upstream(path: &Path) -> Result<String> {
    let mut s = String::new();
    open_upstream(path)?.read_to_string(&mut s).map_err(io_err(path))?;
    Ok(s)
}

/// Writes through a temporary sibling and renames, so a failed stage never
/// leaves a truncated artifact behind.
fn write_artifact(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("partial");
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_artifact(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    write_artifact(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(header).map_err(csv_io)?;
        for r in rows {
            c.write_record(&r).map_err(csv_io)?;
        }
        c.flush()
    })
}

fn out(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.paths.output_dir.join(name)
}

fn load_tracks(cfg: &PipelineConfig) -> Result<TrackSet> {
    let path = out(cfg, TRACKS);
    Ok(read_tracks(open_upstream(&path)?)?)
}

pub fn run_ingest(cfg: &PipelineConfig) -> Result<()> {
    for p in &cfg.paths.pings {
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(p.clone()));
        }
    }
    let p = cfg.params();
    let cleaned = ingest_files(&cfg.paths.pings, &p.clean)?;
    log::info!(
        "ingest: {} records, {} users kept, {} dropped",
        cleaned.report.read,
        cleaned.report.users_kept,
        cleaned.report.users_dropped
    );
    write_artifact(&out(cfg, TRACKS), |w| write_tracks(w, &cleaned.tracks))?;
    write_json(&out(cfg, CLEANING_REPORT), &cleaned.report)
}

pub fn run_homes(cfg: &PipelineConfig) -> Result<()> {
    let tracks = load_tracks(cfg)?;
    let p = cfg.params();
    let (homes, report) = infer_homes(&tracks, &p.home, &p.clock);
    log::info!("homes: {} of {} users", homes.len(), report.users);
    write_homes(&out(cfg, HOMES), &homes)?;
    write_json(&out(cfg, HOME_REPORT), &report)
}

pub fn write_homes(path: &Path, homes: &[HomeRecord]) -> Result<()> {
    write_csv(
        path,
        &["user_id", "ix", "iy", "method", "support"],
        homes.iter().map(|h| {
            vec![
                h.user_id.clone(),
                h.cell.ix.to_string(),
                h.cell.iy.to_string(),
                h.method.as_str().to_owned(),
                h.support.to_string(),
            ]
        }),
    )
}

pub fn read_homes(path: &Path) -> Result<Vec<HomeRecord>> {
    let mut r = csv::Reader::from_reader(open_upstream(path)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let field = |i: usize| rec.get(i).ok_or_else(|| format_err(path, format!("short row {rec:?}")));
        let num = |i: usize| -> Result<i64> { field(i)?.parse().map_err(|e| format_err(path, e)) };
        out.push(HomeRecord {
            user_id: field(0)?.to_owned(),
            cell: GridCell {
                ix: num(1)?,
                iy: num(2)?,
            },
            method: HomeMethod::parse(field(3)?).ok_or_else(|| format_err(path, "unknown home method"))?,
            support: num(4)? as _,
        });
    }
    Ok(out)
}

pub fn run_activities(cfg: &PipelineConfig) -> Result<()> {
    let tracks = load_tracks(cfg)?;
    let acts = extract_all(&tracks, &cfg.params().staypoints);
    log::info!("activities: {}", acts.len());
    let path = out(cfg, ACTIVITIES);
    write_artifact(&path, |w| {
        let mut c = csv::Writer::from_writer(w);
        if acts.is_empty() {
            c.write_record(["user_id", "centroid_e", "centroid_n", "start", "end", "n_points"])
                .map_err(csv_io)?;
        }
        for a in &acts {
            c.serialize(a).map_err(csv_io)?;
        }
        c.flush()
    })
}

pub fn read_activities(path: &Path) -> Result<Vec<Activity>> {
    let mut r = csv::Reader::from_reader(open_upstream(path)?);
    r.deserialize().map(|a| a.map_err(|e| format_err(path, e))).collect()
}

fn load_zones(cfg: &PipelineConfig, p: &Params) -> Result<ZoneMap> {
    let geo = read_upstream(&cfg.paths.zones)?;
    let orders = read_upstream(&cfg.paths.orders)?;
    Ok(load_zonemap(&geo, &orders, &p.buffer)?)
}

pub fn run_classify(cfg: &PipelineConfig) -> Result<()> {
    let homes = read_homes(&out(cfg, HOMES))?;
    let acts = read_activities(&out(cfg, ACTIVITIES))?;
    let p = cfg.params();
    let zonemap = load_zones(cfg, &p)?;
    let (outcomes, report) = classify_all(&homes, &group_activities(acts), &zonemap, &p.classify);
    log::info!(
        "classify: {} users, {} outside all zones",
        report.classified,
        report.outside_excluded
    );
    write_outcomes(&out(cfg, OUTCOMES), &outcomes)?;
    write_csv(
        &out(cfg, NIGHTS),
        &["user_id", "date", "dominant", "imputed"],
        outcomes.iter().flat_map(|o| {
            o.nights.iter().map(|n| {
                vec![
                    o.user_id.clone(),
                    n.date.to_string(),
                    n.dominant.map(|d| d.as_str().to_owned()).unwrap_or_default(),
                    n.imputed.to_string(),
                ]
            })
        }),
    )?;
    write_json(&out(cfg, CLASSIFY_REPORT), &report)
}

pub fn write_outcomes(path: &Path, outcomes: &[UserOutcome]) -> Result<()> {
    write_artifact(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        if outcomes.is_empty() {
            c.write_record([
                "user_id",
                "class",
                "departure_utc",
                "home_zone",
                "nights_away",
                "imputed_nights",
                "region",
            ])
            .map_err(csv_io)?;
        }
        for o in outcomes {
            c.serialize(o.row()).map_err(csv_io)?;
        }
        c.flush()
    })
}

pub fn read_outcomes(path: &Path) -> Result<Vec<OutcomeRow>> {
    let mut r = csv::Reader::from_reader(open_upstream(path)?);
    r.deserialize().map(|a| a.map_err(|e| format_err(path, e))).collect()
}

fn read_census(path: &Path) -> Result<Option<BTreeMap<String, u64>>> {
    if !path.exists() {
        log::warn!("census {} not found; sampling and correlation skipped", path.display());
        return Ok(None);
    }
    let mut r = csv::Reader::from_reader(open_upstream(path)?);
    let mut out = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(path, e))?;
        let region = rec.get(0).unwrap_or("").to_owned();
        let pop: u64 = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|e| format_err(path, format!("population for {region}: {e}")))?;
        out.insert(region, pop);
    }
    Ok(Some(out))
}

pub fn run_metrics(cfg: &PipelineConfig) -> Result<()> {
    let outcomes = read_outcomes(&out(cfg, OUTCOMES))?;
    let census = read_census(&cfg.paths.census)?;
    let p = cfg.params();

    let mut header = vec!["scope"];
    header.extend(EvacClass::ALL.iter().map(|c| c.as_str()));
    header.extend([
        "total",
        "denominator",
        "out_of_zone_rate",
        "overall_rate",
        "out_of_zone_pct",
        "overall_pct",
    ]);
    let denom = cfg.metrics.denominator;
    let rows = counts_by_region(&outcomes).into_iter().map(|(scope, counts)| {
        let mut row = vec![scope.clone()];
        row.extend(counts.0.iter().map(|n| n.to_string()));
        row.push(counts.total().to_string());
        row.push(serde_json::to_value(denom).unwrap().as_str().unwrap_or("").to_owned());
        match rates(&scope, &counts, denom) {
            Ok(r) => row.extend([
                r.out_of_zone_rate.to_string(),
                r.overall_rate.to_string(),
                format!("{:.1}", percent_1dp(r.out_of_zone_rate)),
                format!("{:.1}", percent_1dp(r.overall_rate)),
            ]),
            Err(e) => {
                log::warn!("{e}");
                row.extend(["", "", "", ""].map(String::from));
            }
        }
        row
    });
    write_csv(&out(cfg, RATES), &header, rows.collect::<Vec<_>>())?;

    let curve = response_curve(&outcomes, p.classify.window.interval(), &p.clock);
    let mut curve_rows = Vec::new();
    for (i, bin) in curve.counts.iter().enumerate() {
        let t = curve.bin_time(i);
        for c in EvacClass::EVACUEES {
            curve_rows.push(vec![
                t.to_string(),
                format_utc(t),
                c.as_str().to_owned(),
                bin[c.index()].to_string(),
            ]);
        }
    }
    write_csv(
        &out(cfg, CURVE),
        &["bin_start_utc", "bin_start_iso", "class", "count"],
        curve_rows,
    )?;

    let windows = cfg.waves();
    let waves = wave_summary(&curve, &windows)?;
    let mut wave_rows: Vec<Vec<String>> = windows
        .iter()
        .zip(&waves.waves)
        .map(|(w, (name, n))| {
            vec![
                name.clone(),
                w.start.to_string(),
                w.end.map(|e| e.to_string()).unwrap_or_default(),
                n.to_string(),
            ]
        })
        .collect();
    wave_rows.push(vec![
        "other".into(),
        String::new(),
        String::new(),
        waves.other.to_string(),
    ]);
    write_csv(
        &out(cfg, WAVES),
        &["wave", "start_utc", "end_utc", "departures"],
        wave_rows,
    )?;

    if let Some(census) = census {
        let s = sampling_rate(&outcomes, &census);
        let rows = s.regions.iter().chain(std::iter::once(&s.global)).map(|r| {
            vec![
                r.region.clone(),
                r.residents.to_string(),
                r.population.to_string(),
                r.rate.to_string(),
            ]
        });
        write_csv(
            &out(cfg, SAMPLING),
            &["region", "residents", "population", "rate"],
            rows,
        )?;
        let pairs: Vec<(f64, f64)> = s
            .regions
            .iter()
            .map(|r| (r.residents as f64, r.population as f64))
            .collect();
        let (r, note) = match pearson(&pairs) {
            Ok(r) => (r.to_string(), String::new()),
            Err(e) => (String::new(), e.to_string()),
        };
        write_csv(
            &out(cfg, CORRELATION),
            &["pairs", "pearson_r", "note"],
            [vec![pairs.len().to_string(), r, note]],
        )?;
    }
    Ok(())
}

pub fn run_synth(cfg: &PipelineConfig) -> Result<()> {
    let p = cfg.params();
    let sc = cfg.synth_config();
    let scenario = generate_scenario(&sc, &p.classify, &p.buffer)?;
    log::info!("synth: {} agents", scenario.agents.len());
    let pings = &cfg.paths.pings[0];
    write_artifact(pings, |w| write_pings_ndjson(&scenario, w))?;
    write_artifact(&cfg.paths.zones, |w| w.write_all(scenario.zones_geojson.as_bytes()))?;
    write_artifact(&cfg.paths.orders, |w| w.write_all(scenario.orders_json.as_bytes()))?;
    let census = census(&scenario, sc.population_per_agent);
    write_artifact(&cfg.paths.census, |w| write_census_csv(&census, w).map_err(csv_io))?;
    write_artifact(&cfg.paths.truth, |w| write_truth_csv(&scenario, w).map_err(csv_io))
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = open_upstream(path)?;
    let mut h = Sha256::new();
    std::io::copy(&mut f, &mut h).map_err(io_err(path))?;
    Ok(format!("{:x}", h.finalize()))
}

fn data_rows(path: &Path) -> Result<u64> {
    let mut f = open_upstream(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(io_err(path))?;
    let lines = buf.split(|&b| b == b'\n').filter(|l| !l.is_empty()).count() as u64;
    Ok(lines.saturating_sub(1))
}

fn read_json_value(path: &Path) -> Result<serde_json::Value> {
    serde_json::from_str(&read_upstream(path)?).map_err(|e| format_err(path, e))
}

/// Bundles metrics outputs with a manifest of config, digests and counts.
pub fn run_report(cfg: &PipelineConfig) -> Result<()> {
    let dir = out(cfg, REPORT_DIR);
    let mut artifacts = BTreeMap::new();
    for name in [TRACKS, HOMES, ACTIVITIES, OUTCOMES, NIGHTS] {
        let path = out(cfg, name);
        artifacts.insert(
            name,
            serde_json::json!({"sha256": sha256_file(&path)?, "records": data_rows(&path)?}),
        );
    }
    for name in METRIC_FILES {
        let src = out(cfg, name);
        if name == SAMPLING || name == CORRELATION {
            if !src.exists() {
                continue;
            }
        }
        let bytes = {
            let mut b = Vec::new();
            open_upstream(&src)?.read_to_end(&mut b).map_err(io_err(&src))?;
            b
        };
        write_artifact(&dir.join(name), |w| w.write_all(&bytes))?;
        artifacts.insert(
            name,
            serde_json::json!({"sha256": sha256_file(&src)?, "records": data_rows(&src)?}),
        );
    }
    let mut inputs = BTreeMap::new();
    for p in cfg
        .paths
        .pings
        .iter()
        .chain([&cfg.paths.zones, &cfg.paths.orders, &cfg.paths.census])
    {
        if p.exists() {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    let mut reports = serde_json::Map::new();
    for name in [CLEANING_REPORT, HOME_REPORT, CLASSIFY_REPORT] {
        reports.insert(name.trim_end_matches(".json").into(), read_json_value(&out(cfg, name))?);
    }

    let mut manifest = serde_json::json!({
        "format": "evacmob.manifest",
        "version": 1,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "config": cfg,
        "inputs": inputs,
        "artifacts": artifacts,
        "counts": reports,
    });
    if cfg.paths.truth.exists() {
        let truth = read_truth_csv(open_upstream(&cfg.paths.truth)?)?;
        let outcomes = read_outcomes(&out(cfg, OUTCOMES))?;
        let confusion = score_recovery(&truth, &inferred_labels(&truth, &outcomes))?;
        let recovery = serde_json::json!({
            "classes": EvacClass::ALL.map(|c| c.as_str()),
            "matrix": confusion.matrix,
            "total": confusion.total(),
            "correct": confusion.correct(),
            "accuracy": confusion.accuracy(),
        });
        write_json(&dir.join(RECOVERY), &recovery)?;
        manifest["recovery"] = recovery;
    }
    write_json(&dir.join(CONFIG_SNAPSHOT), cfg)?;
    write_json(&dir.join(MANIFEST), &manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Homes,
    Activities,
    Classify,
    Metrics,
    Synth,
    Report,
    All,
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    match stage {
        Stage::Ingest => run_ingest(cfg),
        Stage::Homes => run_homes(cfg),
        Stage::Activities => run_activities(cfg),
        Stage::Classify => run_classify(cfg),
        Stage::Metrics => run_metrics(cfg),
        Stage::Synth => run_synth(cfg),
        Stage::Report => run_report(cfg),
        Stage::All => {
            run_ingest(cfg)?;
            run_homes(cfg)?;
            run_activities(cfg)?;
            run_classify(cfg)?;
            run_metrics(cfg)?;
            run_report(cfg)
        }
    }
}
