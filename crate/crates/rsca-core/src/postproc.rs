//! Inference reconstruction: probability map -> binary mask -> connected
//! components -> traced contours -> simplified polygons -> dilated text
//! instances -> rescale to original image coordinates.

use crate::error::{Error, Result};
use crate::geometry::{self, Point, Polygon};
use crate::grid::Grid;
use crate::{real, Real};

/// Binary mask over one image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BitMask {
    pub h: usize,
    pub w: usize,
    data: Vec<bool>,
}

impl BitMask {
    pub fn new(h: usize, w: usize) -> Self {
        BitMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Thresholding parameters and filters for the detection chain.
#[derive(Debug, Clone, Copy)]
pub struct DetectParams<T> {
    pub bin_thresh: T,
    pub d_ts: T,
    pub min_area: T,
    pub approx_eps_frac: T,
    pub score_thresh: T,
}

impl<T: Real> Default for DetectParams<T> {
    fn default() -> Self {
        DetectParams {
            bin_thresh: real(0.3),
            d_ts: real(1.5),
            min_area: real(4.0),
            approx_eps_frac: real(0.01),
            score_thresh: real(0.5),
        }
    }
}

/// A scored polygon in original-image coordinates.
#[derive(Debug, Clone)]
pub struct Detection<T> {
    pub polygon: Polygon<T>,
    pub score: T,
}

/// `pixel <- (prob >= t)` over the `(0, 0)` plane.
pub fn binarize<T: Real>(prob: &Grid<T>, t: T) -> BitMask {
    let (h, w) = (prob.h(), prob.w());
    let mut mask = BitMask::new(h, w);
    for y in 0..h {
        for x in 0..w {
            mask.set(y, x, prob.at(0, 0, y, x) >= t);
        }
    }
    mask
}

/// Dense 8-connectivity labeling, labels starting at 1.
#[derive(Debug, Clone)]
pub struct Labels {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Labels {
    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.w + x]
    }

    /// Pixels of one component in raster order.
    pub fn pixels(&self, label: u32) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.at(y, x) == label {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
        }
    }
    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            self.parent[i as usize] = self.parent[self.parent[i as usize] as usize];
            i = self.parent[i as usize];
        }
        i
    }
    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb) as usize] = ra.min(rb);
        }
    }
}

/// Two-pass union-find labeling with 8-connectivity.
pub fn connected_components(mask: &BitMask) -> Labels {
    let (h, w) = (mask.h, mask.w);
    let mut labels = vec![0u32; h * w];
    let mut uf = UnionFind::new(h * w + 1);
    let mut next = 1u32;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            // previously visited neighbors: W, NW, N, NE
            let mut neighbor_labels: Vec<u32> = Vec::with_capacity(4);
            let candidates: [(isize, isize); 4] = [(0, -1), (-1, -1), (-1, 0), (-1, 1)];
            for (dy, dx) in candidates {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (nx as usize) < w && mask.get(ny as usize, nx as usize) {
                    neighbor_labels.push(labels[ny as usize * w + nx as usize]);
                }
            }
            let label = match neighbor_labels.iter().min() {
                Some(&m) => {
                    for &l in &neighbor_labels {
                        uf.union(m, l);
                    }
                    m
                }
                None => {
                    let l = next;
                    next += 1;
                    l
                }
            };
            labels[y * w + x] = label;
        }
    }
    // second pass: resolve to dense labels
    let mut dense: std::collections::HashMap<u32, u32> = std::collections::HashMap::new();
    let mut count = 0u32;
    for i in 0..h * w {
        if labels[i] != 0 {
            let root = uf.find(labels[i]);
            let l = *dense.entry(root).or_insert_with(|| {
                count += 1;
                count
            });
            labels[i] = l;
        }
    }
    Labels {
        h,
        w,
        labels,
        count: count as usize,
    }
}

const MOORE_DIRS: [(isize, isize); 8] = [
    (0, -1),  // W
    (-1, -1), // NW
    (-1, 0),  // N
    (-1, 1),  // NE
    (0, 1),   // E
    (1, 1),   // SE
    (1, 0),   // S
    (1, -1),  // SW
];

fn dir_index(from: (isize, isize), to: (isize, isize)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    MOORE_DIRS.iter().position(|&m| m == d).expect("adjacent cells")
}

/// Traces the outer boundary of one labeled component clockwise through the
/// Moore neighborhood. Returns boundary pixel coordinates `(y, x)`.
pub fn trace_boundary(labels: &Labels, label: u32) -> Vec<(usize, usize)> {
    let (h, w) = (labels.h, labels.w);
    let inside = |y: isize, x: isize| -> bool {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && labels.at(y as usize, x as usize) == label
    };
    let mut start = None;
    'scan: for y in 0..h {
        for x in 0..w {
            if labels.at(y, x) == label {
                start = Some((y as isize, x as isize));
                break 'scan;
            }
        }
    }
    let Some(start) = start else {
        return Vec::new();
    };
    let to_usize = |pts: Vec<(isize, isize)>| -> Vec<(usize, usize)> {
        pts.into_iter().map(|(y, x)| (y as usize, x as usize)).collect()
    };
    let mut contour = vec![start];
    // the west neighbor of the raster-first pixel is background
    let mut backtrack = (start.0, start.1 - 1);
    let mut current = start;
    let first_backtrack = backtrack;
    let limit = 4 * h * w + 8;
    for _ in 0..limit {
        let from = dir_index(current, backtrack);
        let mut moved = false;
        for step in 1..=8 {
            let d = MOORE_DIRS[(from + step) % 8];
            let cand = (current.0 + d.0, current.1 + d.1);
            if inside(cand.0, cand.1) {
                let prev_d = MOORE_DIRS[(from + step - 1) % 8];
                backtrack = (current.0 + prev_d.0, current.1 + prev_d.1);
                current = cand;
                moved = true;
                break;
            }
        }
        if !moved {
            return to_usize(contour); // isolated pixel
        }
        if current == start && backtrack == first_backtrack {
            return to_usize(contour);
        }
        contour.push(current);
    }
    to_usize(contour)
}

fn point_line_distance<T: Real>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let vx = b.x - a.x;
    let vy = b.y - a.y;
    let len = (vx * vx + vy * vy).sqrt();
    if len <= T::zero() {
        let dx = p.x - a.x;
        let dy = p.y - a.y;
        return (dx * dx + dy * dy).sqrt();
    }
    ((p.x - a.x) * vy - (p.y - a.y) * vx).abs() / len
}

fn dp_recurse<T: Real>(pts: &[Point<T>], eps: T, keep: &mut Vec<bool>, lo: usize, hi: usize) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, T::zero());
    for i in lo + 1..hi {
        let d = point_line_distance(pts[i], pts[lo], pts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > eps {
        keep[best] = true;
        dp_recurse(pts, eps, keep, lo, best);
        dp_recurse(pts, eps, keep, best, hi);
    }
}

/// Douglas-Peucker on a closed ring: the ring is split at vertex 0 and the
/// vertex farthest from it, the two open chains are simplified, and the
/// kept vertices are always a subset of the input. `eps = 0` keeps every
/// point.
pub fn simplify_closed<T: Real>(pts: &[Point<T>], eps: T) -> Vec<Point<T>> {
    if eps <= T::zero() || pts.len() <= 4 {
        return pts.to_vec();
    }
    let anchor = 0usize;
    let far = (1..pts.len())
        .max_by(|&a, &b| {
            let da = pts[a].dist2(pts[anchor]);
            let db = pts[b].dist2(pts[anchor]);
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
        .unwrap();
    let mut keep = vec![false; pts.len()];
    keep[anchor] = true;
    keep[far] = true;
    dp_recurse(pts, eps, &mut keep, anchor, far);
    // second chain wraps around; rotate so it is contiguous
    let rotated: Vec<Point<T>> = pts[far..].iter().chain(pts[..=anchor].iter()).copied().collect();
    let mut keep2 = vec![false; rotated.len()];
    dp_recurse(&rotated, eps, &mut keep2, 0, rotated.len() - 1);
    for (i, &k) in keep2.iter().enumerate() {
        if k {
            keep[(far + i) % pts.len()] = true;
        }
    }
    pts.iter()
        .zip(keep.iter())
        .filter_map(|(&p, &k)| if k { Some(p) } else { None })
        .collect()
}

impl<T: Real> Point<T> {
    fn dist2(self, o: Point<T>) -> T {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        dx * dx + dy * dy
    }
}

/// Traces one component and simplifies its contour with
/// `eps = approx_eps_frac * contour perimeter`. Contour points are pixel
/// centers; a single-pixel region yields its 1-pixel square.
pub fn trace_and_approx<T: Real>(labels: &Labels, label: u32, approx_eps_frac: T) -> Result<Polygon<T>> {
    let boundary = trace_boundary(labels, label);
    if boundary.is_empty() {
        return Err(Error::geometry(format!("label {label} has no pixels")));
    }
    let pts: Vec<Point<T>> = boundary
        .iter()
        .map(|&(y, x)| Point::new(real::<T>(x as f64 + 0.5), real::<T>(y as f64 + 0.5)))
        .collect();
    if pts.len() < 3 {
        // single pixel or a 2-pixel sliver: emit the enclosing square
        let (y, x) = (boundary[0].0 as f64, boundary[0].1 as f64);
        return Polygon::from_xy(&[(x, y), (x + 1.0, y), (x + 1.0, y + 1.0), (x, y + 1.0)]);
    }
    let mut perim = T::zero();
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        perim += a.dist2(b).sqrt();
    }
    let simplified = simplify_closed(&pts, approx_eps_frac * perim);
    Polygon::new(simplified)
}

/// Outward dilation `D_ts = A_ts / L_ts * d_ts`; the largest component is
/// kept when offsetting splits the result.
pub fn dilate_instance<T: Real>(spine: &Polygon<T>, d_ts: T) -> Result<Polygon<T>> {
    if d_ts == T::zero() {
        return Ok(spine.clone());
    }
    let offset = geometry::area(spine) / geometry::perimeter(spine) * d_ts;
    let parts = geometry::offset_polygon(spine, offset)?;
    parts
        .into_iter()
        .next()
        .ok_or_else(|| Error::geometry("dilation produced no polygon".to_string()))
}

/// Full reconstruction chain over a probability map at resized resolution.
/// Output polygons are scaled into `orig_w x orig_h` image coordinates.
pub fn detect<T: Real>(
    prob: &Grid<T>,
    params: &DetectParams<T>,
    orig_w: usize,
    orig_h: usize,
) -> Result<Vec<Detection<T>>> {
    let mask = binarize(prob, params.bin_thresh);
    let labels = connected_components(&mask);
    let sx = real::<T>(orig_w as f64) / real::<T>(prob.w() as f64);
    let sy = real::<T>(orig_h as f64) / real::<T>(prob.h() as f64);
    let mut out = Vec::new();
    for label in 1..=labels.count as u32 {
        let pixels = labels.pixels(label);
        let mut score = T::zero();
        for &(y, x) in &pixels {
            score += prob.at(0, 0, y, x);
        }
        score /= real::<T>(pixels.len() as f64);
        if score < params.score_thresh {
            continue;
        }
        let spine = match trace_and_approx(&labels, label, params.approx_eps_frac) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("dropping component {label}: {e}");
                continue;
            }
        };
        if geometry::area(&spine) < params.min_area {
            continue;
        }
        let dilated = match dilate_instance(&spine, params.d_ts) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("dropping component {label} after dilation: {e}");
                continue;
            }
        };
        out.push(Detection {
            polygon: dilated.scaled(sx, sy),
            score,
        });
    }
    Ok(out)
}
