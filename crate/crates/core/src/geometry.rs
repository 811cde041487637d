//! Planar polygon primitives in projected metres.
//!
//! Boolean overlay and outline buffering are delegated to `geo`; containment
//! and boundary distances are implemented here so their exact rules (nonzero
//! winding, boundary-inclusive) are under our control.

use geo::algorithm::buffer::{Buffer, BufferStyle, LineJoin};
use geo::algorithm::orient::{Direction, Orient};
use geo::{Area, BooleanOps, BoundingRect, Coord, LineString, MultiPolygon, Polygon, Rect};

/// Distance below which a point counts as lying on a polygon edge.
pub const BOUNDARY_EPS_M: f64 = 1e-6;

/// A polygon (with holes) normalised to CCW exterior / CW interiors, plus its
/// bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    polygon: Polygon<f64>,
    bbox: Rect<f64>,
}

impl Region {
    pub fn new(polygon: Polygon<f64>) -> Option<Self> {
        let polygon = polygon.orient(Direction::Default);
        let bbox = polygon.bounding_rect()?;
        Some(Self { polygon, bbox })
    }

    pub fn polygon(&self) -> &Polygon<f64> {
        &self.polygon
    }

    pub fn bbox(&self) -> Rect<f64> {
        self.bbox
    }

    pub fn area(&self) -> f64 {
        self.polygon.unsigned_area()
    }

    /// Nonzero winding rule; points on any ring count as inside.
    pub fn contains(&self, p: Coord<f64>) -> bool {
        let min = self.bbox.min();
        let max = self.bbox.max();
        if p.x < min.x - BOUNDARY_EPS_M
            || p.x > max.x + BOUNDARY_EPS_M
            || p.y < min.y - BOUNDARY_EPS_M
            || p.y > max.y + BOUNDARY_EPS_M
        {
            return false;
        }
        let mut winding = 0i64;
        for ring in rings(&self.polygon) {
            if on_ring(ring, p) {
                return true;
            }
            winding += winding_number(ring, p);
        }
        winding != 0
    }

    pub fn centroid_hint(&self) -> Coord<f64> {
        self.bbox.center()
    }

    /// Minimum distance between the boundaries of two regions.
    pub fn boundary_distance(&self, other: &Region) -> f64 {
        let mut best = f64::INFINITY;
        for ra in rings(&self.polygon) {
            for rb in rings(&other.polygon) {
                let d = ring_distance(ra, rb, best);
                best = best.min(d);
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
        best
    }
}

fn rings(p: &Polygon<f64>) -> impl Iterator<Item = &LineString<f64>> {
    std::iter::once(p.exterior()).chain(p.interiors())
}

fn cross(o: Coord<f64>, a: Coord<f64>, b: Coord<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

// Sunday's winding number; rings are closed (first == last).
fn winding_number(ring: &LineString<f64>, p: Coord<f64>) -> i64 {
    let mut wn = 0;
    for seg in ring.0.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        if a.y <= p.y {
            if b.y > p.y && cross(a, b, p) > 0.0 {
                wn += 1;
            }
        } else if b.y <= p.y && cross(a, b, p) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn on_ring(ring: &LineString<f64>, p: Coord<f64>) -> bool {
    ring.0
        .windows(2)
        .any(|s| point_segment_distance(p, s[0], s[1]) <= BOUNDARY_EPS_M)
}

pub fn point_segment_distance(p: Coord<f64>, a: Coord<f64>, b: Coord<f64>) -> f64 {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = a.x + t * dx - p.x;
    let cy = a.y + t * dy - p.y;
    cx.hypot(cy)
}

fn orient_sign(a: Coord<f64>, b: Coord<f64>, c: Coord<f64>) -> i8 {
    let v = cross(a, b, c);
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

fn on_segment_collinear(a: Coord<f64>, b: Coord<f64>, p: Coord<f64>) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub fn segments_intersect(a: Coord<f64>, b: Coord<f64>, c: Coord<f64>, d: Coord<f64>) -> bool {
    let o1 = orient_sign(a, b, c);
    let o2 = orient_sign(a, b, d);
    let o3 = orient_sign(c, d, a);
    let o4 = orient_sign(c, d, b);
    if o1 != o2 && o3 != o4 {
        return true;
    }
    (o1 == 0 && on_segment_collinear(a, b, c))
        || (o2 == 0 && on_segment_collinear(a, b, d))
        || (o3 == 0 && on_segment_collinear(c, d, a))
        || (o4 == 0 && on_segment_collinear(c, d, b))
}

fn segment_distance(a: Coord<f64>, b: Coord<f64>, c: Coord<f64>, d: Coord<f64>) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

fn seg_bbox_gap(a: Coord<f64>, b: Coord<f64>, c: Coord<f64>, d: Coord<f64>) -> f64 {
    let gx = (c.x.min(d.x) - a.x.max(b.x)).max(a.x.min(b.x) - c.x.max(d.x)).max(0.0);
    let gy = (c.y.min(d.y) - a.y.max(b.y)).max(a.y.min(b.y) - c.y.max(d.y)).max(0.0);
    gx.hypot(gy)
}

fn ring_distance(ra: &LineString<f64>, rb: &LineString<f64>, mut best: f64) -> f64 {
    for sa in ra.0.windows(2) {
        for sb in rb.0.windows(2) {
            if seg_bbox_gap(sa[0], sa[1], sb[0], sb[1]) >= best {
                continue;
            }
            let d = segment_distance(sa[0], sa[1], sb[0], sb[1]);
            if d < best {
                best = d;
                if best == 0.0 {
                    return 0.0;
                }
            }
        }
    }
    best
}

/// Why a ring was rejected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RingDefect {
    TooFewVertices,
    ZeroArea,
    SelfIntersection { first: usize, second: usize },
}

impl std::fmt::Display for RingDefect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::TooFewVertices => write!(f, "ring has fewer than 3 distinct vertices"),
            Self::ZeroArea => write!(f, "ring has zero area"),
            Self::SelfIntersection { first, second } => {
                write!(f, "edges {first} and {second} intersect")
            }
        }
    }
}

/// Closes the ring if needed and checks that it is simple.
pub fn validate_ring(coords: &mut Vec<Coord<f64>>) -> Result<(), RingDefect> {
    coords.dedup();
    if coords.len() >= 2 && coords.first() != coords.last() {
        let first = coords[0];
        coords.push(first);
    }
    if coords.len() < 4 {
        return Err(RingDefect::TooFewVertices);
    }
    let n = coords.len() - 1;
    for i in 0..n {
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(coords[i], coords[i + 1], coords[j], coords[j + 1]) {
                return Err(RingDefect::SelfIntersection { first: i, second: j });
            }
        }
    }
    let ring = LineString::new(coords.clone());
    if Polygon::new(ring, vec![]).unsigned_area() == 0.0 {
        return Err(RingDefect::ZeroArea);
    }
    Ok(())
}

/// Number of sides for a circle of `radius` whose inscribed polygon has a
/// sagitta of at most `chord_tol`.
pub fn arc_segments(radius: f64, chord_tol: f64) -> usize {
    if radius <= chord_tol {
        return 8;
    }
    let half_angle = (1.0 - chord_tol / radius).acos();
    ((std::f64::consts::PI / half_angle).ceil() as usize).max(8)
}

pub fn disc(center: Coord<f64>, radius: f64, sides: usize) -> Polygon<f64> {
    let step = std::f64::consts::TAU / sides as f64;
    let mut pts: Vec<Coord<f64>> = (0..sides)
        .map(|i| {
            let a = step * i as f64;
            Coord {
                x: center.x + radius * a.cos(),
                y: center.y + radius * a.sin(),
            }
        })
        .collect();
    pts.push(pts[0]);
    Polygon::new(LineString::new(pts), vec![])
}

pub fn union_all(polys: &[Polygon<f64>]) -> MultiPolygon<f64> {
    let oriented: Vec<Polygon<f64>> = polys.iter().map(|p| p.orient(Direction::Default)).collect();
    geo::unary_union(&oriented)
}

/// Minkowski sum of the union of `polys` with a disc of `radius`, arcs drawn
/// as inscribed polygons with sagitta `<= chord_tol`.
pub fn dilate(polys: &[Polygon<f64>], radius: f64, chord_tol: f64) -> MultiPolygon<f64> {
    let base = union_all(polys);
    if radius <= 0.0 {
        return base;
    }
    let step = std::f64::consts::TAU / arc_segments(radius, chord_tol) as f64;
    base.buffer_with_style(BufferStyle::new(radius).line_join(LineJoin::Round(step)))
}

/// The ring `dilate(polys) \ union(polys)`, split into connected components.
pub fn buffer_ring(polys: &[Polygon<f64>], radius: f64, chord_tol: f64) -> Vec<Polygon<f64>> {
    let grown = dilate(polys, radius, chord_tol);
    let base = union_all(polys);
    let ring = grown.difference(&base);
    ring.0.into_iter().filter(|p| p.unsigned_area() > 0.0).collect()
}

pub fn square(min_x: f64, min_y: f64, side: f64) -> Polygon<f64> {
    let pts = vec![
        Coord { x: min_x, y: min_y },
        Coord {
            x: min_x + side,
            y: min_y,
        },
        Coord {
            x: min_x + side,
            y: min_y + side,
        },
        Coord {
            x: min_x,
            y: min_y + side,
        },
        Coord { x: min_x, y: min_y },
    ];
    Polygon::new(LineString::new(pts), vec![])
}
