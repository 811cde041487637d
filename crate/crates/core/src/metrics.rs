//! Aggregation of per-user outcomes into rates, sampling diagnostics,
//! hourly departure curves and wave summaries.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{EvacClass, OutcomeRow};
use crate::time::{Interval, LocalClock, SECONDS_PER_HOUR};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("rate undefined for scope {scope}: no users")]
    EmptyGroup { scope: String },
    #[error("correlation needs at least two pairs, got {0}")]
    TooFewPairs(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("wave windows {0} and {1} overlap")]
    OverlappingWaves(String, String),
}

/// Users per class, indexed by [`EvacClass::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts(pub [u64; 7]);

impl GroupCounts {
    /// Builds counts from a row laid out as uncategorized, non, shadow, self,
    /// voluntary, mandatory, in-zone.
    pub fn from_row(row: [u64; 7]) -> Self {
        use EvacClass::*;
        let mut c = Self::default();
        let order = [
            Uncategorized,
            NonEvacuee,
            ShadowEvacuee,
            SelfEvacuee,
            VoluntaryEvacuee,
            MandatoryEvacuee,
            InZoneEvacuee,
        ];
        for (class, n) in order.into_iter().zip(row) {
            c.0[class.index()] = n;
        }
        c
    }

    pub fn get(&self, class: EvacClass) -> u64 {
        self.0[class.index()]
    }

    pub fn add(&mut self, class: EvacClass) {
        self.0[class.index()] += 1;
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
        self
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn categorized(&self) -> u64 {
        self.total() - self.get(EvacClass::Uncategorized)
    }

    pub fn out_of_zone_evacuees(&self) -> u64 {
        use EvacClass::*;
        [ShadowEvacuee, SelfEvacuee, VoluntaryEvacuee, MandatoryEvacuee]
            .iter()
            .map(|&c| self.get(c))
            .sum()
    }

    pub fn evacuees(&self) -> u64 {
        self.out_of_zone_evacuees() + self.get(EvacClass::InZoneEvacuee)
    }

    pub fn from_outcomes<'a>(outcomes: impl IntoIterator<Item = &'a OutcomeRow>) -> Self {
        let mut c = Self::default();
        for o in outcomes {
            c.add(o.class);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Every user, uncategorized included.
    #[default]
    All,
    /// Users with a class other than uncategorized.
    Categorized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub scope: String,
    pub out_of_zone_rate: f64,
    pub overall_rate: f64,
}

pub fn rates(scope: &str, counts: &GroupCounts, denominator: Denominator) -> Result<RateReport, MetricsError> {
    let d = match denominator {
        Denominator::All => counts.total(),
        Denominator::Categorized => counts.categorized(),
    };
    if d == 0 {
        return Err(MetricsError::EmptyGroup { scope: scope.into() });
    }
    Ok(RateReport {
        scope: scope.into(),
        out_of_zone_rate: counts.out_of_zone_evacuees() as f64 / d as f64,
        overall_rate: counts.evacuees() as f64 / d as f64,
    })
}

/// A fraction as a percentage rounded half-up to one decimal.
pub fn percent_1dp(fraction: f64) -> f64 {
    // the nudge keeps values like 0.1435 (stored as 0.14349999..) rounding up
    ((fraction * 1000.0) + 0.5 + 1e-9).floor() / 10.0
}

/// Counts per scope: `"all"` followed by each region in name order.
pub fn counts_by_region(outcomes: &[OutcomeRow]) -> Vec<(String, GroupCounts)> {
    let per_region = outcomes
        .par_iter()
        .fold(BTreeMap::<&str, GroupCounts>::new, |mut m, o| {
            m.entry(o.region.as_str()).or_default().add(o.class);
            m
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                let e = a.entry(k).or_default();
                *e = e.merge(v);
            }
            a
        });
    let all = per_region.values().fold(GroupCounts::default(), |a, &b| a.merge(b));
    std::iter::once(("all".to_owned(), all))
        .chain(per_region.into_iter().map(|(k, v)| (k.to_owned(), v)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRow {
    pub region: String,
    pub residents: u64,
    pub population: u64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingReport {
    pub regions: Vec<SamplingRow>,
    pub global: SamplingRow,
    /// Regions skipped for a zero or missing census population.
    pub excluded: Vec<String>,
}

pub fn sampling_ratio(residents: u64, population: u64) -> f64 {
    residents as f64 / population as f64
}

/// Categorized users over census population, per region and overall.
pub fn sampling_rate(outcomes: &[OutcomeRow], census: &BTreeMap<String, u64>) -> SamplingReport {
    let mut residents: BTreeMap<&str, u64> = BTreeMap::new();
    for o in outcomes.iter().filter(|o| o.class != EvacClass::Uncategorized) {
        *residents.entry(o.region.as_str()).or_default() += 1;
    }
    let mut excluded = Vec::new();
    let mut regions = Vec::new();
    for (region, &population) in census {
        let r = residents.get(region.as_str()).copied().unwrap_or(0);
        if population == 0 {
            log::warn!("region {region} has zero census population; excluded from sampling rates");
            excluded.push(region.clone());
            continue;
        }
        regions.push(SamplingRow {
            region: region.clone(),
            residents: r,
            population,
            rate: sampling_ratio(r, population),
        });
    }
    for region in residents.keys().filter(|r| !census.contains_key(**r)) {
        log::warn!("region {region} missing from census; excluded from sampling rates");
        excluded.push((*region).to_owned());
    }
    excluded.sort();
    let res: u64 = regions.iter().map(|r| r.residents).sum();
    let pop: u64 = regions.iter().map(|r| r.population).sum();
    SamplingReport {
        regions,
        global: SamplingRow {
            region: "all".into(),
            residents: res,
            population: pop,
            rate: if pop == 0 { 0.0 } else { sampling_ratio(res, pop) },
        },
        excluded,
    }
}

/// Pearson product-moment correlation.
pub fn pearson(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    if pairs.len() < 2 {
        return Err(MetricsError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn resident_population_correlation(pairs: &[(f64, f64)]) -> Result<f64, MetricsError> {
    pearson(pairs)
}

/// Hourly departure histogram per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub bin_start: i64,
    pub width: i64,
    pub counts: Vec<[u64; 7]>,
}

impl ResponseCurve {
    pub fn bin_time(&self, i: usize) -> i64 {
        self.bin_start + i as i64 * self.width
    }

    pub fn end(&self) -> i64 {
        self.bin_time(self.counts.len())
    }

    pub fn class_total(&self, class: EvacClass) -> u64 {
        self.counts.iter().map(|b| b[class.index()]).sum()
    }

    pub fn bin_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn total(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.bin_total(i)).sum()
    }
}

/// Bins cover the window, widened to local hour boundaries and to every
/// departure present.
pub fn response_curve(outcomes: &[OutcomeRow], window: Interval, clock: &LocalClock) -> ResponseCurve {
    let deps: Vec<(i64, EvacClass)> = outcomes
        .iter()
        .filter(|o| o.class.is_evacuee())
        .filter_map(|o| o.departure_utc.map(|d| (d, o.class)))
        .collect();
    let lo = deps.iter().map(|d| d.0).fold(window.start, i64::min);
    let hi = deps.iter().map(|d| d.0 + 1).fold(window.end, i64::max);
    let start = clock.floor_hour(lo);
    let bins = ((hi - start + SECONDS_PER_HOUR - 1) / SECONDS_PER_HOUR).max(0) as usize;
    let mut counts = vec![[0u64; 7]; bins];
    for (d, class) in deps {
        counts[((d - start) / SECONDS_PER_HOUR) as usize][class.index()] += 1;
    }
    ResponseCurve {
        bin_start: start,
        width: SECONDS_PER_HOUR,
        counts,
    }
}

/// A half-open departure window; `end = None` runs to the end of the curve.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveWindow {
    pub name: String,
    pub start: i64,
    pub end: Option<i64>,
}

impl WaveWindow {
    fn contains(&self, t: i64) -> bool {
        t >= self.start && self.end.is_none_or(|e| t < e)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveSummary {
    pub waves: Vec<(String, u64)>,
    pub other: u64,
}

impl WaveSummary {
    pub fn total(&self) -> u64 {
        self.waves.iter().map(|w| w.1).sum::<u64>() + self.other
    }
}

pub fn validate_waves(waves: &[WaveWindow]) -> Result<(), MetricsError> {
    for (i, a) in waves.iter().enumerate() {
        for b in &waves[i + 1..] {
            let a_end = a.end.unwrap_or(i64::MAX);
            let b_end = b.end.unwrap_or(i64::MAX);
            if a.start < b_end && b.start < a_end {
                return Err(MetricsError::OverlappingWaves(a.name.clone(), b.name.clone()));
            }
        }
    }
    Ok(())
}

/// Evacuee departures per wave, attributed by bin start, plus the remainder.
pub fn wave_summary(curve: &ResponseCurve, waves: &[WaveWindow]) -> Result<WaveSummary, MetricsError> {
    validate_waves(waves)?;
    let mut sums = vec![0u64; waves.len()];
    let mut other = 0;
    for i in 0..curve.counts.len() {
        let n = curve.bin_total(i);
        match waves.iter().position(|w| w.contains(curve.bin_time(i))) {
            Some(w) => sums[w] += n,
            None => other += n,
        }
    }
    Ok(WaveSummary {
        waves: waves.iter().map(|w| w.name.clone()).zip(sums).collect(),
        other,
    })
}
