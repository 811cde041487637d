//! Evacuation zone geometry, order timelines, and the buffer ring.

use std::collections::BTreeMap;

use chrono::{FixedOffset, NaiveDateTime};
use geo::{Coord, LineString, Polygon};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, Region};
use crate::projection::project_wgs84_to_utm17n;

#[derive(Debug, Error)]
pub enum ZoneError {
    #[error("malformed {what} document: {message}")]
    Parse { what: &'static str, message: String },
    #[error("invalid geometry for zone {zone_id}: {reason}")]
    InvalidGeometry { zone_id: String, reason: String },
    #[error("zone {zone_id} has no evacuation orders")]
    NoOrders { zone_id: String },
    #[error("orders reference unknown zone {zone_id}")]
    UnknownZone { zone_id: String },
    #[error("zone {zone_id}: {reason}")]
    InconsistentOrders { zone_id: String, reason: String },
    #[error("no evacuation zones defined")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderLevel {
    Voluntary,
    Mandatory,
}

impl OrderLevel {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Voluntary => "voluntary",
            Self::Mandatory => "mandatory",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderEvent {
    pub time: i64,
    pub level: OrderLevel,
}

/// Membership class of a location; the derived order is precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneClass {
    Outside,
    Buffer,
    Voluntary,
    Mandatory,
}

impl ZoneClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Outside => "outside",
            Self::Buffer => "buffer",
            Self::Voluntary => "voluntary",
            Self::Mandatory => "mandatory",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "outside" => Some(Self::Outside),
            "buffer" => Some(Self::Buffer),
            "voluntary" => Some(Self::Voluntary),
            "mandatory" => Some(Self::Mandatory),
            _ => None,
        }
    }

    pub fn is_evacuation_zone(&self) -> bool {
        matches!(self, Self::Voluntary | Self::Mandatory)
    }
}

#[derive(Debug, Clone)]
pub struct Zone {
    pub zone_id: String,
    pub county: String,
    pub regions: Vec<Region>,
    /// Sorted by time, at most one per level.
    pub orders: Vec<OrderEvent>,
}

impl Zone {
    pub fn new(
        zone_id: impl Into<String>,
        county: impl Into<String>,
        polygons: Vec<Polygon<f64>>,
        mut orders: Vec<OrderEvent>,
    ) -> Result<Self, ZoneError> {
        let zone_id = zone_id.into();
        if orders.is_empty() {
            return Err(ZoneError::NoOrders { zone_id });
        }
        orders.sort_by_key(|o| (o.time, o.level));
        let mut seen = BTreeMap::new();
        for o in &orders {
            if seen.insert(o.level, o.time).is_some() {
                return Err(ZoneError::InconsistentOrders {
                    zone_id,
                    reason: format!("more than one {} order", o.level.as_str()),
                });
            }
        }
        if let (Some(v), Some(m)) = (seen.get(&OrderLevel::Voluntary), seen.get(&OrderLevel::Mandatory)) {
            if m < v {
                return Err(ZoneError::InconsistentOrders {
                    zone_id,
                    reason: "mandatory order precedes voluntary order".into(),
                });
            }
        }
        let mut regions = Vec::with_capacity(polygons.len());
        for p in polygons {
            let mut rings = vec![p.exterior().0.clone()];
            rings.extend(p.interiors().iter().map(|r| r.0.clone()));
            for ring in &mut rings {
                geometry::validate_ring(ring).map_err(|d| ZoneError::InvalidGeometry {
                    zone_id: zone_id.clone(),
                    reason: d.to_string(),
                })?;
            }
            let exterior = LineString::new(rings.remove(0));
            let holes = rings.into_iter().map(LineString::new).collect();
            let region = Region::new(Polygon::new(exterior, holes)).ok_or_else(|| ZoneError::InvalidGeometry {
                zone_id: zone_id.clone(),
                reason: "empty polygon".into(),
            })?;
            regions.push(region);
        }
        if regions.is_empty() {
            return Err(ZoneError::InvalidGeometry {
                zone_id,
                reason: "no polygons".into(),
            });
        }
        Ok(Self {
            zone_id,
            county: county.into(),
            regions,
            orders,
        })
    }

    /// Highest order level ever issued for the zone.
    pub fn class(&self) -> ZoneClass {
        if self.order_time(OrderLevel::Mandatory).is_some() {
            ZoneClass::Mandatory
        } else {
            ZoneClass::Voluntary
        }
    }

    pub fn first_order_time(&self) -> i64 {
        self.orders[0].time
    }

    pub fn order_time(&self, level: OrderLevel) -> Option<i64> {
        self.orders.iter().find(|o| o.level == level).map(|o| o.time)
    }

    pub fn contains(&self, p: Coord<f64>) -> bool {
        self.regions.iter().any(|r| r.contains(p))
    }
}

#[derive(Debug, Clone)]
pub struct BufferComponent {
    pub region: Region,
    /// Index into `ZoneMap::zones` of the nearest zone.
    pub nearest_zone: usize,
    pub order_time: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub radius_m: f64,
    pub chord_tolerance_m: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            radius_m: 7_500.0,
            chord_tolerance_m: 1.0,
        }
    }
}

/// Where a point falls, with the governing zone or buffer component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    Zone(usize),
    Buffer(usize),
    Outside,
}

#[derive(Debug, Clone)]
pub struct ZoneMap {
    pub zones: Vec<Zone>,
    pub buffer: Vec<BufferComponent>,
}

/// Distances within this many metres are treated as ties.
const DISTANCE_TIE_M: f64 = 0.01;

/// Earliest order time of the zone whose boundary is nearest to `component`.
/// Ties (within 1 cm) go to the earlier order time, then the lower index.
pub fn assign_buffer_order_time(component: &Region, zones: &[Zone]) -> (usize, i64) {
    assert!(!zones.is_empty(), "buffer order time needs at least one zone");
    let mut best: Option<(f64, i64, usize)> = None;
    for (i, z) in zones.iter().enumerate() {
        let d = z
            .regions
            .iter()
            .map(|r| component.boundary_distance(r))
            .fold(f64::INFINITY, f64::min);
        let t = z.first_order_time();
        best = match best {
            None => Some((d, t, i)),
            Some((bd, bt, bi)) => {
                if d < bd - DISTANCE_TIE_M || ((d - bd).abs() <= DISTANCE_TIE_M && t < bt) {
                    Some((d, t, i))
                } else {
                    Some((bd, bt, bi))
                }
            }
        };
    }
    let (_, t, i) = best.expect("non-empty zones");
    (i, t)
}

/// Buffer ring around the union of every zone polygon.
pub fn build_buffer(zones: &[Zone], cfg: &BufferConfig) -> Vec<Polygon<f64>> {
    let polys: Vec<Polygon<f64>> = zones
        .iter()
        .flat_map(|z| z.regions.iter().map(|r| r.polygon().clone()))
        .collect();
    geometry::buffer_ring(&polys, cfg.radius_m, cfg.chord_tolerance_m)
}

impl ZoneMap {
    pub fn new(zones: Vec<Zone>, cfg: &BufferConfig) -> Result<Self, ZoneError> {
        if zones.is_empty() {
            return Err(ZoneError::Empty);
        }
        let buffer = build_buffer(&zones, cfg)
            .into_iter()
            .filter_map(Region::new)
            .map(|region| {
                let (nearest_zone, order_time) = assign_buffer_order_time(&region, &zones);
                BufferComponent {
                    region,
                    nearest_zone,
                    order_time,
                }
            })
            .collect();
        Ok(Self { zones, buffer })
    }

    pub fn place(&self, easting: f64, northing: f64) -> Placement {
        let p = Coord {
            x: easting,
            y: northing,
        };
        let mut best: Option<usize> = None;
        for (i, z) in self.zones.iter().enumerate() {
            if !z.contains(p) {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (zb, zi) = (&self.zones[b], z);
                    let key_b = (std::cmp::Reverse(zb.class()), zb.first_order_time(), &zb.zone_id);
                    let key_i = (std::cmp::Reverse(zi.class()), zi.first_order_time(), &zi.zone_id);
                    if key_i < key_b {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        if let Some(i) = best {
            return Placement::Zone(i);
        }
        match self.buffer.iter().position(|b| b.region.contains(p)) {
            Some(i) => Placement::Buffer(i),
            None => Placement::Outside,
        }
    }

    pub fn locate(&self, easting: f64, northing: f64) -> ZoneClass {
        match self.place(easting, northing) {
            Placement::Zone(i) => self.zones[i].class(),
            Placement::Buffer(_) => ZoneClass::Buffer,
            Placement::Outside => ZoneClass::Outside,
        }
    }

    pub fn in_evacuation_zone(&self, easting: f64, northing: f64) -> bool {
        let p = Coord {
            x: easting,
            y: northing,
        };
        self.zones.iter().any(|z| z.contains(p))
    }

    /// County label for a placement; buffer components inherit the nearest zone's.
    pub fn county_of(&self, placement: Placement) -> Option<&str> {
        match placement {
            Placement::Zone(i) => Some(&self.zones[i].county),
            Placement::Buffer(i) => Some(&self.zones[self.buffer[i].nearest_zone].county),
            Placement::Outside => None,
        }
    }
}

// ---- GeoJSON / orders documents ----

#[derive(Deserialize)]
struct FeatureCollection {
    features: Vec<Feature>,
}

#[derive(Deserialize)]
struct Feature {
    properties: FeatureProps,
    geometry: Geometry,
}

#[derive(Deserialize)]
struct FeatureProps {
    zone_id: String,
    #[serde(default)]
    county: Option<String>,
}

#[derive(Deserialize)]
#[serde(tag = "type", content = "coordinates")]
enum Geometry {
    Polygon(Vec<Vec<[f64; 2]>>),
    MultiPolygon(Vec<Vec<Vec<[f64; 2]>>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRecord {
    pub zone_id: String,
    pub level: OrderLevel,
    pub time_iso8601_local: String,
    pub utc_offset: String,
}

impl OrderRecord {
    pub fn utc_time(&self) -> Result<i64, String> {
        let local = NaiveDateTime::parse_from_str(&self.time_iso8601_local, "%Y-%m-%dT%H:%M:%S")
            .or_else(|_| NaiveDateTime::parse_from_str(&self.time_iso8601_local, "%Y-%m-%dT%H:%M"))
            .map_err(|e| format!("bad time {:?}: {e}", self.time_iso8601_local))?;
        let offset = parse_utc_offset(&self.utc_offset)?;
        Ok(local.and_utc().timestamp() - offset.local_minus_utc() as i64)
    }
}

pub fn parse_utc_offset(s: &str) -> Result<FixedOffset, String> {
    let bad = || format!("bad utc_offset {s:?}");
    let (sign, rest) = match s.as_bytes().first() {
        Some(b'+') => (1, &s[1..]),
        Some(b'-') => (-1, &s[1..]),
        _ => return Err(bad()),
    };
    let (h, m) = rest.split_once(':').unwrap_or((rest, "0"));
    let h: i32 = h.parse().map_err(|_| bad())?;
    let m: i32 = m.parse().map_err(|_| bad())?;
    FixedOffset::east_opt(sign * (h * 3600 + m * 60)).ok_or_else(bad)
}

fn project_ring(zone_id: &str, ring: &[[f64; 2]]) -> Result<LineString<f64>, ZoneError> {
    ring.iter()
        .map(|&[lon, lat]| {
            project_wgs84_to_utm17n(lat, lon)
                .map(|(x, y)| Coord { x, y })
                .map_err(|e| ZoneError::InvalidGeometry {
                    zone_id: zone_id.to_owned(),
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>, _>>()
        .map(LineString::new)
}

fn project_polygon(zone_id: &str, rings: &[Vec<[f64; 2]>]) -> Result<Polygon<f64>, ZoneError> {
    let (outer, holes) = rings.split_first().ok_or_else(|| ZoneError::InvalidGeometry {
        zone_id: zone_id.to_owned(),
        reason: "polygon without rings".into(),
    })?;
    let exterior = project_ring(zone_id, outer)?;
    let holes = holes
        .iter()
        .map(|h| project_ring(zone_id, h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Polygon::new(exterior, holes))
}

/// Builds a validated [`ZoneMap`] from a WGS84 GeoJSON FeatureCollection and a
/// JSON array of [`OrderRecord`]s. Features sharing a `zone_id` are merged.
pub fn load_zonemap(geojson: &str, orders: &str, cfg: &BufferConfig) -> Result<ZoneMap, ZoneError> {
    let fc: FeatureCollection = serde_json::from_str(geojson).map_err(|e| ZoneError::Parse {
        what: "zone GeoJSON",
        message: e.to_string(),
    })?;
    let records: Vec<OrderRecord> = serde_json::from_str(orders).map_err(|e| ZoneError::Parse {
        what: "orders",
        message: e.to_string(),
    })?;

    let mut shapes: BTreeMap<String, (String, Vec<Polygon<f64>>)> = BTreeMap::new();
    for f in fc.features {
        let id = f.properties.zone_id;
        let polys = match &f.geometry {
            Geometry::Polygon(rings) => vec![project_polygon(&id, rings)?],
            Geometry::MultiPolygon(ps) => ps
                .iter()
                .map(|rings| project_polygon(&id, rings))
                .collect::<Result<_, _>>()?,
        };
        let entry = shapes
            .entry(id)
            .or_insert_with(|| (f.properties.county.clone().unwrap_or_default(), Vec::new()));
        entry.1.extend(polys);
    }

    let mut orders: BTreeMap<String, Vec<OrderEvent>> = BTreeMap::new();
    for r in &records {
        if !shapes.contains_key(&r.zone_id) {
            return Err(ZoneError::UnknownZone {
                zone_id: r.zone_id.clone(),
            });
        }
        let time = r.utc_time().map_err(|message| ZoneError::Parse {
            what: "orders",
            message,
        })?;
        orders
            .entry(r.zone_id.clone())
            .or_default()
            .push(OrderEvent { time, level: r.level });
    }

    let zones = shapes
        .into_iter()
        .map(|(id, (county, polys))| {
            let o = orders.remove(&id).unwrap_or_default();
            Zone::new(id, county, polys, o)
        })
        .collect::<Result<Vec<_>, _>>()?;
    ZoneMap::new(zones, cfg)
}
