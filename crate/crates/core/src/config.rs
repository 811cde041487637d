//! Run configuration: one TOML (or JSON) file, environment overrides, validation.
//!
//! Overrides use `EVACMOB_<SECTION>__<KEY>` (top-level keys: `EVACMOB_<KEY>`).
//! Values are read as JSON when they parse as JSON, otherwise as strings.

use std::path::{Path, PathBuf};

use chrono::{DateTime, NaiveDate, NaiveDateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{ClassifyConfig, StudyWindow};
use crate::home::HomeConfig;
use crate::ingest::{AccuracyClass, CleanConfig};
use crate::metrics::{validate_waves, Denominator, WaveWindow};
use crate::pipeline::Params;
use crate::staypoints::StayPointConfig;
use crate::synth::SynthConfig;
use crate::time::{LocalClock, SECONDS_PER_DAY, SECONDS_PER_HOUR};
use crate::zones::{parse_utc_offset, BufferConfig};

pub const ENV_PREFIX: &str = "EVACMOB_";
/// Names the config file; never treated as an override.
pub const CONFIG_ENV: &str = "EVACMOB_CONFIG";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl FieldError {
    fn new(field: &str, reason: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {}", .0.iter().map(|e| format!("{}: {}", e.field, e.reason)).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<FieldError>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub pings: Vec<PathBuf>,
    pub zones: PathBuf,
    pub orders: PathBuf,
    pub census: PathBuf,
    pub truth: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            pings: vec!["pings.ndjson".into()],
            zones: "zones.geojson".into(),
            orders: "orders.json".into(),
            census: "census.csv".into(),
            truth: "truth.csv".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub min_points: usize,
    pub accuracy_keep: Vec<AccuracyClass>,
}

impl Default for IngestSection {
    fn default() -> Self {
        let c = CleanConfig::default();
        Self {
            min_points: c.min_points,
            accuracy_keep: c.accuracy_keep,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZonesSection {
    pub buffer_radius_m: f64,
    pub chord_tolerance_m: f64,
}

impl Default for ZonesSection {
    fn default() -> Self {
        let b = BufferConfig::default();
        Self {
            buffer_radius_m: b.radius_m,
            chord_tolerance_m: b.chord_tolerance_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomeSection {
    pub grid_m: f64,
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub min_nights: u32,
    pub min_weekend_hours: f64,
    pub gap_cap_hours: f64,
    /// Inclusive local dates.
    pub home_window_start: NaiveDate,
    pub home_window_end: NaiveDate,
    pub min_active_days: u32,
    pub min_points_per_day: u32,
}

impl Default for HomeSection {
    fn default() -> Self {
        let h = HomeConfig::default();
        Self {
            grid_m: h.grid_m,
            night_start_hour: h.night_start_hour,
            night_end_hour: h.night_end_hour,
            min_nights: h.min_nights,
            min_weekend_hours: h.min_weekend_s as f64 / 3600.0,
            gap_cap_hours: h.gap_cap_s as f64 / 3600.0,
            home_window_start: h.window_start,
            home_window_end: h.window_end,
            min_active_days: h.min_active_days,
            min_points_per_day: h.min_points_per_day,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StayPointSection {
    pub radius_m: f64,
    pub min_duration_s: i64,
}

impl Default for StayPointSection {
    fn default() -> Self {
        let s = StayPointConfig::default();
        Self {
            radius_m: s.radius_m,
            min_duration_s: s.min_duration_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifySection {
    /// Inclusive local dates.
    pub window_start: NaiveDate,
    pub window_end: NaiveDate,
    pub landfall: DateTime<Utc>,
    pub night_start_hour: u32,
    pub night_end_hour: u32,
    pub min_nights_away_zone: u32,
    pub min_nights_away_buffer: u32,
    pub max_missing_nights: u32,
    pub post_departure_days: u32,
}

impl Default for ClassifySection {
    fn default() -> Self {
        let c = ClassifyConfig::default();
        Self {
            window_start: NaiveDate::from_ymd_opt(2022, 9, 23).unwrap(),
            window_end: NaiveDate::from_ymd_opt(2022, 9, 29).unwrap(),
            landfall: DateTime::from_timestamp(c.window.landfall, 0).unwrap(),
            night_start_hour: c.night_start_hour,
            night_end_hour: c.night_end_hour,
            min_nights_away_zone: c.min_nights_away_zone,
            min_nights_away_buffer: c.min_nights_away_buffer,
            max_missing_nights: c.max_missing_nights,
            post_departure_days: (c.window.post_departure_s / SECONDS_PER_DAY) as u32,
        }
    }
}

/// A wave window in local wall time; no `end` means open-ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveSpec {
    pub name: String,
    pub start: NaiveDateTime,
    #[serde(default)]
    pub end: Option<NaiveDateTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub denominator: Denominator,
    pub waves: Vec<WaveSpec>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let t = |d: u32, h: u32| {
            NaiveDate::from_ymd_opt(2022, 9, d)
                .unwrap()
                .and_hms_opt(h, 0, 0)
                .unwrap()
        };
        let w = |name: &str, start, end| WaveSpec {
            name: name.into(),
            start,
            end,
        };
        Self {
            denominator: Denominator::All,
            waves: vec![
                w("wave1", t(23, 0), Some(t(24, 0))),
                w("wave2", t(26, 12), Some(t(27, 12))),
                w("wave3", t(29, 12), None),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub seed: u64,
    pub utc_offset: String,
    pub paths: PathsConfig,
    pub ingest: IngestSection,
    pub zones: ZonesSection,
    pub home: HomeSection,
    pub staypoints: StayPointSection,
    pub classify: ClassifySection,
    pub metrics: MetricsSection,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workers: 0,
            seed: 7,
            utc_offset: "-04:00".into(),
            paths: PathsConfig::default(),
            ingest: IngestSection::default(),
            zones: ZonesSection::default(),
            home: HomeSection::default(),
            staypoints: StayPointSection::default(),
            classify: ClassifySection::default(),
            metrics: MetricsSection::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn toml_to_json(v: toml::Value) -> serde_json::Value {
    use serde_json::Value as J;
    match v {
        toml::Value::String(s) => J::String(s),
        toml::Value::Integer(i) => J::from(i),
        toml::Value::Float(f) => serde_json::Number::from_f64(f).map_or(J::Null, J::Number),
        toml::Value::Boolean(b) => J::Bool(b),
        toml::Value::Datetime(d) => J::String(d.to_string()),
        toml::Value::Array(a) => J::Array(a.into_iter().map(toml_to_json).collect()),
        toml::Value::Table(t) => J::Object(t.into_iter().map(|(k, v)| (k, toml_to_json(v))).collect()),
    }
}

/// Applies `EVACMOB_A__B=value` style overrides onto a JSON document.
pub fn apply_env_overrides(
    doc: &mut serde_json::Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Vec<String> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != CONFIG_ENV).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..]
            .split("__")
            .map(|s| s.to_ascii_lowercase())
            .collect();
        if path.iter().any(|p| p.is_empty()) {
            continue;
        }
        let value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw));
        let mut node = &mut *doc;
        for seg in &path[..path.len() - 1] {
            if !node.is_object() {
                *node = serde_json::Value::Object(Default::default());
            }
            node = node
                .as_object_mut()
                .unwrap()
                .entry(seg.clone())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
        }
        if !node.is_object() {
            *node = serde_json::Value::Object(Default::default());
        }
        node.as_object_mut()
            .unwrap()
            .insert(path.last().unwrap().clone(), value);
        applied.push(path.join("."));
    }
    applied
}

fn parse_document(path: Option<&Path>, text: &str) -> Result<serde_json::Value, ConfigError> {
    let is_json = path.is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    let parse_err = |m: String| ConfigError::Invalid(vec![FieldError::new("<document>", m)]);
    if is_json {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    } else {
        let v: toml::Value = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        Ok(toml_to_json(v))
    }
}

impl PipelineConfig {
    /// Loads `path` (or defaults when `None`), applies overrides from `env`,
    /// resolves relative paths against the config file's directory and
    /// validates.
    pub fn load(path: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self, ConfigError> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.to_owned(),
                    source,
                })?;
                parse_document(Some(p), &text)?
            }
            None => serde_json::Value::Object(Default::default()),
        };
        apply_env_overrides(&mut doc, env);
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
            let field = e.path().to_string();
            ConfigError::Invalid(vec![FieldError::new(&field, e.into_inner().to_string())])
        })?;
        let base = path.and_then(Path::parent).unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        let errors = cfg.validate();
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    pub fn clock(&self) -> LocalClock {
        let off = parse_utc_offset(&self.utc_offset).map_or(0, |o| o.local_minus_utc() as i64);
        LocalClock::new(off)
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut e = Vec::new();
        let mut check = |ok: bool, field: &str, reason: &str| {
            if !ok {
                e.push(FieldError::new(field, reason));
            }
        };
        let ok_offset = parse_utc_offset(&self.utc_offset).is_ok();
        check(ok_offset, "utc_offset", "expected ±HH:MM");
        check(!self.paths.pings.is_empty(), "paths.pings", "at least one ping file");

        check(self.ingest.min_points > 0, "ingest.min_points", "must be positive");
        check(
            !self.ingest.accuracy_keep.is_empty(),
            "ingest.accuracy_keep",
            "must not be empty",
        );

        let z = &self.zones;
        check(z.buffer_radius_m > 0.0, "zones.buffer_radius_m", "must be positive");
        check(
            z.chord_tolerance_m > 0.0 && z.chord_tolerance_m < z.buffer_radius_m,
            "zones.chord_tolerance_m",
            "must be positive and below the radius",
        );

        let h = &self.home;
        check(h.grid_m > 0.0, "home.grid_m", "must be positive");
        check(h.night_start_hour < 24, "home.night_start_hour", "must be below 24");
        check(h.night_end_hour < 24, "home.night_end_hour", "must be below 24");
        check(h.min_nights > 0, "home.min_nights", "must be positive");
        check(h.min_weekend_hours > 0.0, "home.min_weekend_hours", "must be positive");
        check(h.gap_cap_hours > 0.0, "home.gap_cap_hours", "must be positive");
        check(
            h.home_window_start <= h.home_window_end,
            "home.home_window_end",
            "precedes home_window_start",
        );
        check(h.min_active_days > 0, "home.min_active_days", "must be positive");
        check(h.min_points_per_day > 0, "home.min_points_per_day", "must be positive");

        check(
            self.staypoints.radius_m > 0.0,
            "staypoints.radius_m",
            "must be positive",
        );
        check(
            self.staypoints.min_duration_s > 0,
            "staypoints.min_duration_s",
            "must be positive",
        );

        let c = &self.classify;
        check(c.night_start_hour < 24, "classify.night_start_hour", "must be below 24");
        check(c.night_end_hour < 24, "classify.night_end_hour", "must be below 24");
        check(
            c.min_nights_away_zone > 0,
            "classify.min_nights_away_zone",
            "must be positive",
        );
        check(
            c.min_nights_away_buffer > 0,
            "classify.min_nights_away_buffer",
            "must be positive",
        );
        check(
            c.max_missing_nights > 0,
            "classify.max_missing_nights",
            "must be positive",
        );
        check(
            c.post_departure_days > 0,
            "classify.post_departure_days",
            "must be positive",
        );
        if ok_offset {
            let w = self.study_window();
            check(
                w.start < w.landfall,
                "classify.landfall",
                "must follow the window start",
            );
            check(w.landfall < w.end, "classify.landfall", "must precede the window end");
            let waves = self.waves();
            for (spec, win) in self.metrics.waves.iter().zip(&waves) {
                if win.end.is_some_and(|end| end <= win.start) {
                    check(
                        false,
                        "metrics.waves",
                        &format!("wave {} ends before it starts", spec.name),
                    );
                }
            }
            if let Err(err) = validate_waves(&waves) {
                check(false, "metrics.waves", &err.to_string());
            }
        }

        let s = &self.synth;
        check(
            s.ping_rate_per_hour > 0.0,
            "synth.ping_rate_per_hour",
            "must be positive",
        );
        check(s.noise_sigma_m >= 0.0, "synth.noise_sigma_m", "must be non-negative");
        check((0.0..=1.0).contains(&s.gap_prob), "synth.gap_prob", "must be in [0, 1]");
        check(s.speed_mps > 0.0, "synth.speed_mps", "must be positive");
        e
    }

    pub fn study_window(&self) -> StudyWindow {
        let clock = self.clock();
        let c = &self.classify;
        StudyWindow {
            start: clock.date_start(c.window_start),
            end: clock.date_start(c.window_end) + SECONDS_PER_DAY,
            landfall: c.landfall.timestamp(),
            post_departure_s: c.post_departure_days as i64 * SECONDS_PER_DAY,
        }
    }

    pub fn waves(&self) -> Vec<WaveWindow> {
        let clock = self.clock();
        self.metrics
            .waves
            .iter()
            .map(|w| WaveWindow {
                name: w.name.clone(),
                start: clock.local_to_utc(w.start),
                end: w.end.map(|e| clock.local_to_utc(e)),
            })
            .collect()
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn params(&self) -> Params {
        let clock = self.clock();
        let h = &self.home;
        let c = &self.classify;
        Params {
            clock,
            clean: CleanConfig {
                min_points: self.ingest.min_points,
                accuracy_keep: self.ingest.accuracy_keep.clone(),
            },
            buffer: BufferConfig {
                radius_m: self.zones.buffer_radius_m,
                chord_tolerance_m: self.zones.chord_tolerance_m,
            },
            home: HomeConfig {
                grid_m: h.grid_m,
                night_start_hour: h.night_start_hour,
                night_end_hour: h.night_end_hour,
                min_nights: h.min_nights,
                min_weekend_s: (h.min_weekend_hours * SECONDS_PER_HOUR as f64).round() as i64,
                gap_cap_s: (h.gap_cap_hours * SECONDS_PER_HOUR as f64).round() as i64,
                window_start: h.home_window_start,
                window_end: h.home_window_end,
                min_active_days: h.min_active_days,
                min_points_per_day: h.min_points_per_day,
            },
            staypoints: StayPointConfig {
                radius_m: self.staypoints.radius_m,
                min_duration_s: self.staypoints.min_duration_s,
            },
            classify: ClassifyConfig {
                window: self.study_window(),
                clock,
                grid_m: h.grid_m,
                night_start_hour: c.night_start_hour,
                night_end_hour: c.night_end_hour,
                min_nights_away_zone: c.min_nights_away_zone,
                min_nights_away_buffer: c.min_nights_away_buffer,
                max_missing_nights: c.max_missing_nights,
            },
        }
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !base.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        self.pings.iter_mut().for_each(fix);
        for p in [
            &mut self.zones,
            &mut self.orders,
            &mut self.census,
            &mut self.truth,
            &mut self.output_dir,
        ] {
            fix(p);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_reproduce_module_defaults() {
        let cfg = PipelineConfig::load(None, env(&[])).unwrap();
        assert_eq!(cfg.params(), Params::default());
    }

    #[test]
    fn toml_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "workers = 2\n[home]\nmin_nights = 4\nhome_window_start = 2022-09-02\n[paths]\noutput_dir = \"o\"\n",
        )
        .unwrap();
        let cfg = PipelineConfig::load(
            Some(&path),
            env(&[
                ("EVACMOB_HOME__MIN_NIGHTS", "6"),
                ("EVACMOB_WORKERS", "3"),
                ("OTHER", "1"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.home.min_nights, 6);
        assert_eq!(cfg.home.home_window_start, NaiveDate::from_ymd_opt(2022, 9, 2).unwrap());
        assert_eq!(cfg.paths.output_dir, dir.path().join("o"));
    }

    #[test]
    fn validation_lists_fields() {
        let err = PipelineConfig::load(
            None,
            env(&[
                ("EVACMOB_HOME__MIN_NIGHTS", "0"),
                ("EVACMOB_CLASSIFY__LANDFALL", "\"2022-10-05T00:00:00Z\""),
            ]),
        )
        .unwrap_err();
        let ConfigError::Invalid(fields) = err else { panic!() };
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        assert_eq!(names, ["home.min_nights", "classify.landfall"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::load(None, env(&[("EVACMOB_HOME__MIN_NITES", "3")])).unwrap_err();
        let ConfigError::Invalid(fields) = err else { panic!() };
        assert!(fields[0].reason.contains("min_nites"));
    }

    #[test]
    fn json_snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::load(None, env(&[("EVACMOB_SEED", "42")])).unwrap();
        let path = dir.path().join("snap.json");
        std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
        let mut again = PipelineConfig::load(Some(&path), env(&[])).unwrap();
        again.paths = cfg.paths.clone();
        assert_eq!(again, cfg);
    }

    #[test]
    fn overlapping_waves_fail_validation() {
        let mut cfg = PipelineConfig::default();
        cfg.metrics.waves[1].start = cfg.metrics.waves[0].start;
        assert!(cfg.validate().iter().any(|f| f.field == "metrics.waves"));
    }
}
