//! Polygon arithmetic behind label generation and inference: area and
//! perimeter, the shrink-offset formula `D = A/L * (1 - r^2)`, inward and
//! outward polygon offsetting with miter joins, and the linear shrink-ratio
//! schedule.

use crate::error::{Error, Result};
use crate::{real, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Real> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }
    fn sub(self, o: Point<T>) -> Point<T> {
        Point::new(self.x - o.x, self.y - o.y)
    }
    fn add(self, o: Point<T>) -> Point<T> {
        Point::new(self.x + o.x, self.y + o.y)
    }
    fn scale(self, s: T) -> Point<T> {
        Point::new(self.x * s, self.y * s)
    }
    fn cross(self, o: Point<T>) -> T {
        self.x * o.y - self.y * o.x
    }
    fn norm(self) -> T {
        (self.x * self.x + self.y * self.y).sqrt()
    }
    fn dist(self, o: Point<T>) -> T {
        self.sub(o).norm()
    }
}

/// Ordered vertex list in image coordinates, implicitly closed. Normalized
/// to counter-clockwise orientation (positive shoelace sum) on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon<T> {
    vertices: Vec<Point<T>>,
}

fn shoelace<T: Real>(pts: &[Point<T>]) -> T {
    let mut acc = T::zero();
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.cross(b);
    }
    acc / real::<T>(2.0)
}

impl<T: Real> Polygon<T> {
    /// Builds a polygon, dropping consecutive duplicate vertices and
    /// normalizing orientation. Fewer than 3 distinct vertices is an error.
    pub fn new(points: Vec<Point<T>>) -> Result<Self> {
        let mut vertices: Vec<Point<T>> = Vec::with_capacity(points.len());
        for p in points {
            if vertices.last().map_or(true, |&q| q != p) {
                vertices.push(p);
            }
        }
        while vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(Error::geometry(format!(
                "polygon needs >= 3 distinct vertices, got {}",
                vertices.len()
            )));
        }
        if shoelace(&vertices) < T::zero() {
            vertices.reverse();
        }
        Ok(Polygon { vertices })
    }

    pub fn from_xy(points: &[(f64, f64)]) -> Result<Self> {
        Self::new(points.iter().map(|&(x, y)| Point::new(real(x), real(y))).collect())
    }

    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn signed_area(&self) -> T {
        shoelace(&self.vertices)
    }

    pub fn bbox(&self) -> (Point<T>, Point<T>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for p in &self.vertices {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    pub fn scaled(&self, sx: T, sy: T) -> Polygon<T> {
        Polygon {
            vertices: self.vertices.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect(),
        }
    }

    /// Even-odd point containment test.
    pub fn contains(&self, p: Point<T>) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if (a.y > p.y) != (b.y > p.y) {
                let t = (p.y - a.y) / (b.y - a.y);
                let xi = a.x + t * (b.x - a.x);
                if p.x < xi {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// True when no two non-adjacent edges properly intersect and adjacent
    /// edges meet only at their shared endpoint.
    pub fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a1, a2) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (b1, b2) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_intersect(a1, a2, b1, b2) {
                    return false;
                }
            }
        }
        true
    }
}

/// Shoelace absolute area.
pub fn area<T: Real>(p: &Polygon<T>) -> T {
    p.signed_area().abs()
}

/// Euclidean edge-length sum.
pub fn perimeter<T: Real>(p: &Polygon<T>) -> T {
    let n = p.vertices.len();
    let mut acc = T::zero();
    for i in 0..n {
        acc += p.vertices[i].dist(p.vertices[(i + 1) % n]);
    }
    acc
}

/// Shrink offset `D = A/L * (1 - r^2)` for shrink ratio `r` in (0, 1].
pub fn shrink_offset<T: Real>(p: &Polygon<T>, r: T) -> Result<T> {
    if r <= T::zero() || r > T::one() {
        return Err(Error::param(format!("shrink ratio must be in (0, 1], got {r}")));
    }
    let l = perimeter(p);
    if l <= T::zero() {
        return Err(Error::geometry("zero perimeter".to_string()));
    }
    Ok(area(p) / l * (T::one() - r * r))
}

/// Per-epoch shrink ratio: linear from `r_a` at epoch 0 to `r_b` at
/// `max_epoch`, clamped above.
#[derive(Debug, Clone, Copy)]
pub struct ShrinkSchedule<T> {
    pub r_a: T,
    pub r_b: T,
    pub max_epoch: usize,
}

impl<T: Real> ShrinkSchedule<T> {
    pub fn new(r_a: T, r_b: T, max_epoch: usize) -> Result<Self> {
        for (name, v) in [("r_a", r_a), ("r_b", r_b)] {
            if v <= T::zero() || v > T::one() {
                return Err(Error::param(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if max_epoch == 0 {
            return Err(Error::param("max_epoch must be positive".to_string()));
        }
        Ok(ShrinkSchedule { r_a, r_b, max_epoch })
    }
}

pub fn schedule_ratio<T: Real>(s: &ShrinkSchedule<T>, epoch: usize) -> T {
    let e = epoch.min(s.max_epoch);
    let beta = real::<T>(e as f64) / real::<T>(s.max_epoch as f64);
    s.r_a + (s.r_b - s.r_a) * beta
}

fn line_intersection<T: Real>(a1: Point<T>, a2: Point<T>, b1: Point<T>, b2: Point<T>) -> Option<Point<T>> {
    let d1 = a2.sub(a1);
    let d2 = b2.sub(b1);
    let denom = d1.cross(d2);
    if denom.abs() < real::<T>(1e-12) * (d1.norm() * d2.norm() + T::one()) {
        return None;
    }
    let t = b1.sub(a1).cross(d2) / denom;
    Some(a1.add(d1.scale(t)))
}

/// Proper intersection test (shared endpoints excluded by the caller's
/// adjacency filter).
fn segments_intersect<T: Real>(a1: Point<T>, a2: Point<T>, b1: Point<T>, b2: Point<T>) -> bool {
    segment_intersection(a1, a2, b1, b2).is_some()
}

/// Intersection point of two segments, interior to both (parameters in the
/// open interval), or None.
fn segment_intersection<T: Real>(
    a1: Point<T>,
    a2: Point<T>,
    b1: Point<T>,
    b2: Point<T>,
) -> Option<(T, T, Point<T>)> {
    let (t, u, p) = segment_params(a1, a2, b1, b2)?;
    let lo = real::<T>(1e-9);
    let hi = T::one() - lo;
    if t > lo && t < hi && u > lo && u < hi {
        Some((t, u, p))
    } else {
        None
    }
}

/// Like `segment_intersection` but with parameters in the closed interval,
/// so touches at segment endpoints are reported too.
fn segment_params<T: Real>(
    a1: Point<T>,
    a2: Point<T>,
    b1: Point<T>,
    b2: Point<T>,
) -> Option<(T, T, Point<T>)> {
    let d1 = a2.sub(a1);
    let d2 = b2.sub(b1);
    let denom = d1.cross(d2);
    let eps = real::<T>(1e-12) * (d1.norm() * d2.norm() + T::one());
    if denom.abs() < eps {
        return None;
    }
    let t = b1.sub(a1).cross(d2) / denom;
    let u = b1.sub(a1).cross(d1) / denom;
    let slack = real::<T>(1e-9);
    if t >= -slack && t <= T::one() + slack && u >= -slack && u <= T::one() + slack {
        Some((t, u, a1.add(d1.scale(t))))
    } else {
        None
    }
}

/// Splits a closed ring at all pairwise segment intersections, then extracts
/// simple sub-loops by popping whenever a previously visited point repeats.
fn untangle<T: Real>(ring: &[Point<T>]) -> Vec<Vec<Point<T>>> {
    let n = ring.len();
    if n < 3 {
        return Vec::new();
    }
    // collect split points per edge, sorted along the edge
    let mut splits: Vec<Vec<(T, Point<T>)>> = vec![Vec::new(); n];
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in i + 1..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            // proper crossings split both edges; a ring vertex touching the
            // interior of another edge splits only that edge (the vertex is
            // already in the ring, so the repeat triggers loop extraction)
            if let Some((t, u, p)) = segment_params(a1, a2, b1, b2) {
                let lo = real::<T>(1e-9);
                let hi = T::one() - lo;
                let t_interior = t > lo && t < hi;
                let u_interior = u > lo && u < hi;
                if t_interior {
                    splits[i].push((t, p));
                }
                if u_interior {
                    splits[j].push((u, p));
                }
            }
        }
    }
    let mut expanded: Vec<Point<T>> = Vec::with_capacity(n * 2);
    for i in 0..n {
        expanded.push(ring[i]);
        splits[i].sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
        for &(_, p) in &splits[i] {
            expanded.push(p);
        }
    }

    // tolerance scaled to the ring's extent
    let mut extent = T::one();
    for p in &expanded {
        extent = extent.max(p.x.abs()).max(p.y.abs());
    }
    let eps = real::<T>(1e-7) * extent;
    let close = |a: Point<T>, b: Point<T>| a.dist(b) <= eps;

    let mut loops: Vec<Vec<Point<T>>> = Vec::new();
    let mut stack: Vec<Point<T>> = Vec::new();
    for p in expanded {
        if let Some(pos) = stack.iter().position(|&q| close(q, p)) {
            let looped: Vec<Point<T>> = stack.drain(pos..).collect();
            if looped.len() >= 3 {
                loops.push(looped);
            }
            stack.push(p);
        } else {
            stack.push(p);
        }
    }
    if stack.len() >= 3 {
        loops.push(stack);
    }
    loops
}

const MITER_LIMIT: f64 = 2.0;

fn point_segment_distance<T: Real>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let ab = b.sub(a);
    let len2 = ab.x * ab.x + ab.y * ab.y;
    if len2 <= T::zero() {
        return p.dist(a);
    }
    let t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
    let t = t.max(T::zero()).min(T::one());
    p.dist(a.add(ab.scale(t)))
}

fn boundary_distance<T: Real>(p: &Polygon<T>, q: Point<T>) -> T {
    let verts = p.vertices();
    let n = verts.len();
    let mut best = T::infinity();
    for i in 0..n {
        best = best.min(point_segment_distance(q, verts[i], verts[(i + 1) % n]));
    }
    best
}

/// Offsets a simple polygon by a signed distance: positive dilates, negative
/// shrinks. Miter joins with limit 2, falling back to bevel. Inward
/// offsetting may split the polygon; components with area below 1 px^2 (or
/// with inverted orientation, i.e. vanished regions) are dropped. Results
/// are sorted by area, largest first.
pub fn offset_polygon<T: Real>(p: &Polygon<T>, d: T) -> Result<Vec<Polygon<T>>> {
    if d == T::zero() {
        return Ok(vec![p.clone()]);
    }
    let verts = p.vertices();
    let n = verts.len();
    // input is CCW; outward normal of a directed edge is (dy, -dx)/|d|
    let mut offsets: Vec<Point<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let dir = verts[(i + 1) % n].sub(verts[i]);
        let len = dir.norm();
        if len <= T::zero() {
            return Err(Error::geometry("degenerate edge".to_string()));
        }
        offsets.push(Point::new(dir.y / len * d, -dir.x / len * d));
    }

    let miter_limit = real::<T>(MITER_LIMIT) * d.abs();
    let mut ring: Vec<Point<T>> = Vec::with_capacity(n * 2);
    for i in 0..n {
        let prev = (i + n - 1) % n;
        let v = verts[i];
        // offset copies of the two edges meeting at v
        let a1 = verts[prev].add(offsets[prev]);
        let a2 = v.add(offsets[prev]);
        let b1 = v.add(offsets[i]);
        let b2 = verts[(i + 1) % n].add(offsets[i]);
        match line_intersection(a1, a2, b1, b2) {
            Some(m) if m.dist(v) <= miter_limit => ring.push(m),
            _ => {
                // parallel edges or miter limit exceeded: bevel
                ring.push(a2);
                ring.push(b1);
            }
        }
    }

    let mut out: Vec<Polygon<T>> = Vec::new();
    // a shrunk region must stay inside the source and reach depth |d| from
    // its boundary somewhere; symmetric over-shrinks otherwise re-invert into
    // a spurious positively oriented ring whose points all sit shallower than
    // |d|. Crossing vertices of a genuine ring may land slightly under |d|
    // where another edge is nearby, so only the deepest vertex must reach it.
    let min_dist = d.abs() * real::<T>(1.0 - 1e-6);
    for looped in untangle(&ring) {
        if shoelace(&looped) <= T::zero() {
            continue; // inverted: the region vanished under this offset
        }
        if d < T::zero() {
            if looped.iter().any(|&q| !p.contains(q)) {
                continue;
            }
            let deepest = looped
                .iter()
                .map(|&q| boundary_distance(p, q))
                .fold(T::zero(), |a, b| a.max(b));
            if deepest < min_dist {
                continue;
            }
        }
        if let Ok(poly) = Polygon::new(looped) {
            if area(&poly) >= T::one() {
                out.push(poly);
            }
        }
    }
    out.sort_by(|a, b| area(b).partial_cmp(&area(a)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(out)
}

/// Repairs a non-simple polygon by even-odd loop decomposition, keeping the
/// largest component.
pub fn repair<T: Real>(p: &Polygon<T>) -> Result<Polygon<T>> {
    if p.is_simple() {
        return Ok(p.clone());
    }
    log::warn!("repairing non-simple polygon with {} vertices", p.len());
    untangle(p.vertices())
        .into_iter()
        .filter_map(|l| Polygon::new(l).ok())
        .max_by(|a, b| area(a).partial_cmp(&area(b)).unwrap_or(std::cmp::Ordering::Equal))
        .ok_or_else(|| Error::geometry("polygon could not be repaired".to_string()))
}

/// Inward shrink for the given epoch of the schedule:
/// `offset_polygon(p, -shrink_offset(p, schedule_ratio(s, epoch)))`.
pub fn shrink_for_epoch<T: Real>(
    p: &Polygon<T>,
    s: &ShrinkSchedule<T>,
    epoch: usize,
) -> Result<Vec<Polygon<T>>> {
    let r = schedule_ratio(s, epoch);
    let d = shrink_offset(p, r)?;
    offset_polygon(p, -d)
}
