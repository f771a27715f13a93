//! Polygon detection evaluation: IoU via polygon clipping, greedy one-to-one
//! matching at an IoU threshold, and micro-averaged precision / recall /
//! F-measure.

use crate::error::{Error, Result};
use crate::geometry::{self, Point, Polygon};
use crate::postproc::Detection;
use crate::{real, Real};

/// Match counts and the derived metrics for one image or a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult<T> {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, ground-truth index, IoU)` for every matched pair.
    pub pairs: Vec<(usize, usize, T)>,
    pub precision: T,
    pub recall: T,
    pub f_measure: T,
}

impl<T: Real> MatchResult<T> {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, pairs: Vec<(usize, usize, T)>) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                T::zero()
            } else {
                real::<T>(num as f64 / den as f64)
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f_measure = if precision + recall > T::zero() {
            real::<T>(2.0) * precision * recall / (precision + recall)
        } else {
            T::zero()
        };
        MatchResult {
            tp,
            fp,
            fn_,
            pairs,
            precision,
            recall,
            f_measure,
        }
    }
}

fn cross3<T: Real>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Ear-clipping triangulation of a simple CCW polygon. Falls back to
/// dropping the flattest vertex if no strict ear exists (collinear runs).
fn triangulate<T: Real>(p: &Polygon<T>) -> Vec<[Point<T>; 3]> {
    let mut verts: Vec<Point<T>> = p.vertices().to_vec();
    let mut tris = Vec::with_capacity(verts.len().saturating_sub(2));
    let eps = real::<T>(1e-12);
    while verts.len() > 3 {
        let n = verts.len();
        let mut clipped = false;
        for i in 0..n {
            let (a, b, c) = (verts[(i + n - 1) % n], verts[i], verts[(i + 1) % n]);
            if cross3(a, b, c) <= eps {
                continue; // reflex or flat corner
            }
            let mut contains_other = false;
            for (j, &q) in verts.iter().enumerate() {
                if j == (i + n - 1) % n || j == i || j == (i + 1) % n {
                    continue;
                }
                if cross3(a, b, q) >= -eps && cross3(b, c, q) >= -eps && cross3(c, a, q) >= -eps {
                    contains_other = true;
                    break;
                }
            }
            if !contains_other {
                tris.push([a, b, c]);
                verts.remove(i);
                clipped = true;
                break;
            }
        }
        if !clipped {
            // degenerate remainder: drop the flattest corner and continue
            let n = verts.len();
            let flattest = (0..n)
                .min_by(|&i, &j| {
                    let ci = cross3(verts[(i + n - 1) % n], verts[i], verts[(i + 1) % n]).abs();
                    let cj = cross3(verts[(j + n - 1) % n], verts[j], verts[(j + 1) % n]).abs();
                    ci.partial_cmp(&cj).unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap();
            verts.remove(flattest);
        }
    }
    if verts.len() == 3 {
        tris.push([verts[0], verts[1], verts[2]]);
    }
    tris
}

fn tri_area<T: Real>(t: &[Point<T>; 3]) -> T {
    (cross3(t[0], t[1], t[2]) / real::<T>(2.0)).abs()
}

/// Sutherland-Hodgman clip of a convex subject against a convex CCW clipper.
fn clip_convex<T: Real>(subject: &[Point<T>], clipper: &[Point<T>; 3]) -> Vec<Point<T>> {
    let mut poly: Vec<Point<T>> = subject.to_vec();
    for i in 0..3 {
        if poly.is_empty() {
            break;
        }
        let (a, b) = (clipper[i], clipper[(i + 1) % 3]);
        let mut next: Vec<Point<T>> = Vec::with_capacity(poly.len() + 2);
        for j in 0..poly.len() {
            let p = poly[j];
            let q = poly[(j + 1) % poly.len()];
            let sp = cross3(a, b, p);
            let sq = cross3(a, b, q);
            if sp >= T::zero() {
                next.push(p);
            }
            if (sp > T::zero() && sq < T::zero()) || (sp < T::zero() && sq > T::zero()) {
                let t = sp / (sp - sq);
                next.push(Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)));
            }
        }
        poly = next;
    }
    poly
}

fn ring_area<T: Real>(pts: &[Point<T>]) -> T {
    if pts.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..pts.len() {
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        acc += a.x * b.y - b.x * a.y;
    }
    (acc / real::<T>(2.0)).abs()
}

/// Intersection area of two simple polygons, computed by triangulating both
/// and summing pairwise triangle intersections.
pub fn intersection_area<T: Real>(a: &Polygon<T>, b: &Polygon<T>) -> T {
    let (alo, ahi) = a.bbox();
    let (blo, bhi) = b.bbox();
    if alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y {
        return T::zero();
    }
    let tris_a = triangulate(a);
    let tris_b = triangulate(b);
    let mut acc = T::zero();
    for ta in &tris_a {
        if tri_area(ta) <= T::zero() {
            continue;
        }
        for tb in &tris_b {
            let clipped = clip_convex(ta, tb);
            acc += ring_area(&clipped);
        }
    }
    acc
}

/// `area(a intersect b) / area(a union b)`, in `[0, 1]`. Degenerate inputs
/// score 0.
pub fn polygon_iou<T: Real>(a: &Polygon<T>, b: &Polygon<T>) -> Result<T> {
    let (aa, ab) = (geometry::area(a), geometry::area(b));
    if aa <= T::zero() || ab <= T::zero() {
        return Ok(T::zero());
    }
    let inter = intersection_area(a, b);
    let union = aa + ab - inter;
    if union <= T::zero() {
        return Err(Error::geometry("degenerate union".to_string()));
    }
    Ok((inter / union).max(T::zero()).min(T::one()))
}

/// One image's ground truth: polygon plus don't-care flag.
#[derive(Debug, Clone)]
pub struct GroundTruth<T> {
    pub polygon: Polygon<T>,
    pub ignore: bool,
}

/// Greedy one-to-one matching by descending IoU. Pairs at or above the
/// threshold are true positives. Detections whose best remaining overlap is
/// with an ignored truth are excluded from the false-positive count;
/// unmatched non-ignored truths are false negatives.
pub fn match_detections<T: Real>(
    dets: &[Detection<T>],
    gts: &[GroundTruth<T>],
    iou_thresh: T,
) -> Result<MatchResult<T>> {
    let mut candidates: Vec<(T, usize, usize)> = Vec::new();
    for (di, det) in dets.iter().enumerate() {
        for (gi, gt) in gts.iter().enumerate() {
            let iou = polygon_iou(&det.polygon, &gt.polygon)?;
            if iou >= iou_thresh {
                candidates.push((iou, di, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut pairs: Vec<(usize, usize, T)> = Vec::new();
    for (iou, di, gi) in candidates {
        if det_used[di] || gt_used[gi] {
            continue;
        }
        det_used[di] = true;
        gt_used[gi] = true;
        // a detection absorbed by an ignored truth counts as neither TP nor FP
        if !gts[gi].ignore {
            pairs.push((di, gi, iou));
        }
    }
    let tp = pairs.len();
    let fp = (0..dets.len()).filter(|&i| !det_used[i]).count();
    let fn_ = gts
        .iter()
        .enumerate()
        .filter(|(i, g)| !g.ignore && !gt_used[*i])
        .count();
    Ok(MatchResult::from_counts(tp, fp, fn_, pairs))
}

/// Micro-averaged aggregation: sums tp/fp/fn across images, then recomputes
/// the metrics.
pub fn aggregate<T: Real>(per_image: &[MatchResult<T>]) -> MatchResult<T> {
    let tp = per_image.iter().map(|m| m.tp).sum();
    let fp = per_image.iter().map(|m| m.fp).sum();
    let fn_ = per_image.iter().map(|m| m.fn_).sum();
    MatchResult::from_counts(tp, fp, fn_, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> Polygon<f64> {
        Polygon::from_xy(&[(x0, y0), (x1, y0), (x1, y1), (x0, y1)]).unwrap()
    }

    fn det(p: Polygon<f64>) -> Detection<f64> {
        Detection { polygon: p, score: 0.9 }
    }

    fn gt(p: Polygon<f64>, ignore: bool) -> GroundTruth<f64> {
        GroundTruth { polygon: p, ignore }
    }

    #[test]
    fn identical_polygons_iou_one() {
        let p = square(0.0, 0.0, 4.0, 4.0);
        let iou = polygon_iou(&p, &p).unwrap();
        assert!((iou - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_polygons_iou_zero() {
        let a = square(0.0, 0.0, 2.0, 2.0);
        let b = square(5.0, 5.0, 7.0, 7.0);
        assert_eq!(polygon_iou(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn half_overlapping_unit_squares() {
        let a = square(0.0, 0.0, 1.0, 1.0);
        let b = square(0.5, 0.0, 1.5, 1.0);
        let iou = polygon_iou(&a, &b).unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn iou_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let a = random_convex(&mut rng);
            let b = random_convex(&mut rng);
            let ab = polygon_iou(&a, &b).unwrap();
            let ba = polygon_iou(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-9);
        }
    }

    fn random_convex(rng: &mut ChaCha8Rng) -> Polygon<f64> {
        let cx = rng.gen_range(20.0..60.0);
        let cy = rng.gen_range(20.0..60.0);
        let mut angles: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        angles.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
        let pts: Vec<(f64, f64)> = angles
            .iter()
            .map(|&t| {
                let r = rng.gen_range(10.0..25.0);
                (cx + r * t.cos(), cy + r * t.sin())
            })
            .collect();
        Polygon::from_xy(&pts).unwrap()
    }

    /// Scanline-rasterized IoU oracle, independent of the clipping path.
    fn rasterized_iou(a: &Polygon<f64>, b: &Polygon<f64>, res: usize) -> f64 {
        let (alo, ahi) = a.bbox();
        let (blo, bhi) = b.bbox();
        let x0 = alo.x.min(blo.x) - 1.0;
        let y0 = alo.y.min(blo.y) - 1.0;
        let x1 = ahi.x.max(bhi.x) + 1.0;
        let y1 = ahi.y.max(bhi.y) + 1.0;
        let step_x = (x1 - x0) / res as f64;
        let step_y = (y1 - y0) / res as f64;
        let (mut inter, mut union) = (0usize, 0usize);
        for iy in 0..res {
            let y = y0 + (iy as f64 + 0.5) * step_y;
            for ix in 0..res {
                let p = Point::new(x0 + (ix as f64 + 0.5) * step_x, y);
                let ina = a.contains(p);
                let inb = b.contains(p);
                if ina && inb {
                    inter += 1;
                }
                if ina || inb {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_close_to_rasterized_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let a = random_convex(&mut rng);
            let b = random_convex(&mut rng);
            let exact = polygon_iou(&a, &b).unwrap();
            let approx = rasterized_iou(&a, &b, 500);
            assert!((exact - approx).abs() < 0.01, "exact {exact} vs oracle {approx}");
        }
    }

    #[test]
    fn perfect_detections_score_one() {
        let truths = vec![gt(square(0.0, 0.0, 5.0, 5.0), false), gt(square(10.0, 0.0, 15.0, 5.0), false)];
        let dets: Vec<_> = truths.iter().map(|g| det(g.polygon.clone())).collect();
        let m = match_detections(&dets, &truths, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
        assert_eq!(m.precision, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f_measure, 1.0);
    }

    #[test]
    fn no_detections() {
        let truths = vec![gt(square(0.0, 0.0, 5.0, 5.0), false), gt(square(10.0, 0.0, 15.0, 5.0), false)];
        let m = match_detections::<f64>(&[], &truths, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f_measure, 0.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let truths = vec![gt(square(0.0, 0.0, 5.0, 5.0), false)];
        let dets = vec![det(square(0.0, 0.0, 5.0, 5.0)), det(square(0.1, 0.0, 5.1, 5.0))];
        let m = match_detections(&dets, &truths, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
    }

    #[test]
    fn ignored_truth_absorbs_detection() {
        let truths = vec![gt(square(0.0, 0.0, 5.0, 5.0), true)];
        let dets = vec![det(square(0.0, 0.0, 5.0, 5.0))];
        let m = match_detections(&dets, &truths, 0.5).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 0));
    }

    #[test]
    fn duplicating_detections_never_raises_precision() {
        let truths = vec![gt(square(0.0, 0.0, 5.0, 5.0), false), gt(square(8.0, 8.0, 12.0, 12.0), false)];
        let dets = vec![det(square(0.0, 0.0, 5.0, 5.0))];
        let single = match_detections(&dets, &truths, 0.5).unwrap();
        let doubled: Vec<_> = dets.iter().chain(dets.iter()).cloned().collect();
        let double = match_detections(&doubled, &truths, 0.5).unwrap();
        assert_eq!(single.recall, double.recall);
        assert!(double.precision <= single.precision);
    }

    #[test]
    fn f_measure_between_min_and_max() {
        let m = MatchResult::<f64>::from_counts(2, 1, 3, Vec::new());
        assert!(m.f_measure >= m.precision.min(m.recall));
        assert!(m.f_measure <= m.precision.max(m.recall));
    }

    #[test]
    fn aggregate_cases() {
        let a = MatchResult::<f64>::from_counts(1, 1, 0, Vec::new());
        let b = MatchResult::<f64>::from_counts(1, 0, 1, Vec::new());
        let agg = aggregate(&[a.clone(), b]);
        assert!((agg.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((agg.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((agg.f_measure - 2.0 / 3.0).abs() < 1e-12);
        let single = aggregate(&[a.clone()]);
        assert_eq!((single.tp, single.fp, single.fn_), (a.tp, a.fp, a.fn_));
        let empty = aggregate::<f64>(&[]);
        assert_eq!((empty.tp, empty.fp, empty.fn_), (0, 0, 0));
        assert_eq!(empty.f_measure, 0.0);
    }
}
