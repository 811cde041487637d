//! Sequential stay-point clustering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{CleanPing, TrackSet, UserTrack};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub user_id: String,
    pub centroid_e: f64,
    pub centroid_n: f64,
    pub start: i64,
    pub end: i64,
    pub n_points: u32,
}

impl Activity {
    pub fn duration(&self) -> i64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StayPointConfig {
    pub radius_m: f64,
    pub min_duration_s: i64,
}

impl Default for StayPointConfig {
    fn default() -> Self {
        Self {
            radius_m: 100.0,
            min_duration_s: 300,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cluster {
    sum_e: f64,
    sum_n: f64,
    count: u32,
    first: i64,
    last: i64,
}

impl Cluster {
    fn seed(p: &CleanPing) -> Self {
        Self {
            sum_e: p.easting,
            sum_n: p.northing,
            count: 1,
            first: p.timestamp,
            last: p.timestamp,
        }
    }

    fn centroid(&self) -> (f64, f64) {
        (self.sum_e / self.count as f64, self.sum_n / self.count as f64)
    }

    fn add(&mut self, p: &CleanPing) {
        self.sum_e += p.easting;
        self.sum_n += p.northing;
        self.count += 1;
        self.last = p.timestamp;
    }
}

/// Incremental extractor. The state between pushes is a plain value, so a
/// pass can be checkpointed by cloning and resumed later.
#[derive(Debug, Clone, PartialEq)]
pub struct StayPointExtractor {
    cfg: StayPointConfig,
    user_id: String,
    open: Option<Cluster>,
}

impl StayPointExtractor {
    pub fn new(user_id: impl Into<String>, cfg: StayPointConfig) -> Self {
        Self {
            cfg,
            user_id: user_id.into(),
            open: None,
        }
    }

    /// True when no cluster is open, i.e. the extractor sits between clusters.
    pub fn is_idle(&self) -> bool {
        self.open.is_none()
    }

    fn close(&self, c: &Cluster) -> Option<Activity> {
        if c.last - c.first < self.cfg.min_duration_s {
            return None;
        }
        let (e, n) = c.centroid();
        Some(Activity {
            user_id: self.user_id.clone(),
            centroid_e: e,
            centroid_n: n,
            start: c.first,
            end: c.last,
            n_points: c.count,
        })
    }

    /// Feeds the next ping (in time order); returns an activity when the
    /// ping closes a qualifying cluster.
    pub fn push(&mut self, p: &CleanPing) -> Option<Activity> {
        let Some(c) = self.open.as_mut() else {
            self.open = Some(Cluster::seed(p));
            return None;
        };
        let (ce, cn) = c.centroid();
        let (de, dn) = (p.easting - ce, p.northing - cn);
        if de * de + dn * dn < self.cfg.radius_m * self.cfg.radius_m {
            c.add(p);
            return None;
        }
        let closed = *c;
        self.open = Some(Cluster::seed(p));
        self.close(&closed)
    }

    pub fn finish(&mut self) -> Option<Activity> {
        self.open.take().and_then(|c| self.close(&c))
    }
}

pub fn extract_activities(track: &UserTrack, cfg: &StayPointConfig) -> Vec<Activity> {
    let mut ex = StayPointExtractor::new(track.user_id.clone(), *cfg);
    let mut out: Vec<Activity> = track.pings.iter().filter_map(|p| ex.push(p)).collect();
    out.extend(ex.finish());
    out
}

/// Activities for every user, ordered by `user_id` then start.
pub fn extract_all(tracks: &TrackSet, cfg: &StayPointConfig) -> Vec<Activity> {
    let users: Vec<&UserTrack> = tracks.values().collect();
    let per_user: Vec<Vec<Activity>> = users.par_iter().map(|t| extract_activities(t, cfg)).collect();
    per_user.into_iter().flatten().collect()
}
