//! Rasterizes text-spine polygons into per-pixel training masks and computes
//! the segmentation losses over prediction/mask pairs.

use crate::error::{Error, Result};
use crate::geometry::{shrink_for_epoch, Point, Polygon, ShrinkSchedule};
use crate::grid::Grid;
use crate::{real, Real};

/// Binary positive mask plus a don't-care mask. A pixel is never both.
#[derive(Debug, Clone)]
pub struct LabelMask<T> {
    pub mask: Grid<T>,
    pub ignore: Grid<T>,
}

impl<T: Real> LabelMask<T> {
    pub fn empty(h: usize, w: usize) -> Self {
        LabelMask {
            mask: Grid::zeros(1, 1, h, w),
            ignore: Grid::zeros(1, 1, h, w),
        }
    }

    pub fn positives(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > real(0.5)).count()
    }
}

/// Annotation instance: a polygon plus its don't-care flag.
#[derive(Debug, Clone)]
pub struct Annotation<T> {
    pub polygon: Polygon<T>,
    pub ignore: bool,
}

fn paint<T: Real>(target: &mut Grid<T>, polygons: &[Polygon<T>]) {
    let h = target.h();
    let w = target.w();
    for poly in polygons {
        let (lo, hi) = poly.bbox();
        let x0 = lo.x.to_f64().unwrap_or(0.0).floor().max(0.0) as usize;
        let y0 = lo.y.to_f64().unwrap_or(0.0).floor().max(0.0) as usize;
        let x1 = (hi.x.to_f64().unwrap_or(0.0).ceil() as isize).clamp(0, w as isize) as usize;
        let y1 = (hi.y.to_f64().unwrap_or(0.0).ceil() as isize).clamp(0, h as isize) as usize;
        for y in y0..y1 {
            for x in x0..x1 {
                let center = Point::new(real::<T>(x as f64 + 0.5), real::<T>(y as f64 + 0.5));
                if poly.contains(center) {
                    *target.at_mut(0, 0, y, x) = T::one();
                }
            }
        }
    }
}

/// Pixel-center even-odd rasterization of polygons into a `(1,1,h,w)` mask.
/// Out-of-frame parts are clipped by construction.
pub fn rasterize<T: Real>(polygons: &[Polygon<T>], h: usize, w: usize) -> LabelMask<T> {
    let mut out = LabelMask::empty(h, w);
    paint(&mut out.mask, polygons);
    out
}

/// Builds the per-epoch training target: positives are the shrunk spines of
/// non-ignored annotations; ignore-marked annotations are rasterized at full
/// extent into the ignore channel. Polygons that fail to shrink are skipped
/// with a warning.
pub fn make_training_target<T: Real>(
    annotations: &[Annotation<T>],
    schedule: &ShrinkSchedule<T>,
    epoch: usize,
    h: usize,
    w: usize,
) -> LabelMask<T> {
    let mut spines: Vec<Polygon<T>> = Vec::new();
    let mut ignored: Vec<Polygon<T>> = Vec::new();
    for ann in annotations {
        if ann.ignore {
            ignored.push(ann.polygon.clone());
            continue;
        }
        match shrink_for_epoch(&ann.polygon, schedule, epoch) {
            Ok(parts) => spines.extend(parts),
            Err(e) => log::warn!("skipping annotation: {e}"),
        }
    }
    let mut out = rasterize(&spines, h, w);
    paint(&mut out.ignore, &ignored);
    // a pixel is never both positive and ignored
    for i in 0..out.mask.len() {
        if out.mask.data()[i] > real(0.5) {
            out.ignore.data_mut()[i] = T::zero();
        }
    }
    out
}

/// Loss value plus the sample counts that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport<T> {
    pub total: T,
    pub n_pos: usize,
    pub n_neg_selected: usize,
}

const CLAMP_EPS: f64 = 1e-7;

#[inline]
fn clamp_pred<T: Real>(x: T) -> T {
    let eps = real::<T>(CLAMP_EPS);
    x.max(eps).min(T::one() - eps)
}

#[inline]
fn bce_pixel<T: Real>(pred: T, positive: bool) -> T {
    let x = clamp_pred(pred);
    if positive {
        -x.ln()
    } else {
        -(T::one() - x).ln()
    }
}

fn check_loss_shapes<T: Real>(pred: &Grid<T>, target: &LabelMask<T>) -> Result<()> {
    if !pred.same_shape(&target.mask) {
        return Err(Error::shape(format!(
            "loss: pred {:?} vs mask {:?}",
            pred.shape(),
            target.mask.shape()
        )));
    }
    Ok(())
}

/// Per-pixel classification split, excluding ignored pixels.
fn partition<T: Real>(target: &LabelMask<T>) -> (Vec<usize>, Vec<usize>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let half = real::<T>(0.5);
    for i in 0..target.mask.len() {
        if target.ignore.data()[i] > half {
            continue;
        }
        if target.mask.data()[i] > half {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    (pos, neg)
}

/// Mean binary cross-entropy over non-ignored pixels.
pub fn bce_loss<T: Real>(pred: &Grid<T>, target: &LabelMask<T>) -> Result<LossReport<T>> {
    check_loss_shapes(pred, target)?;
    let (pos, neg) = partition(target);
    let count = pos.len() + neg.len();
    if count == 0 {
        return Ok(LossReport {
            total: T::zero(),
            n_pos: 0,
            n_neg_selected: 0,
        });
    }
    let mut acc = T::zero();
    for &i in &pos {
        acc += bce_pixel(pred.data()[i], true);
    }
    for &i in &neg {
        acc += bce_pixel(pred.data()[i], false);
    }
    Ok(LossReport {
        total: acc / real::<T>(count as f64),
        n_pos: pos.len(),
        n_neg_selected: neg.len(),
    })
}

/// Gradient of [`bce_loss`] with respect to the prediction, zero on ignored
/// pixels.
pub fn bce_loss_grad<T: Real>(pred: &Grid<T>, target: &LabelMask<T>) -> Result<Grid<T>> {
    check_loss_shapes(pred, target)?;
    let (pos, neg) = partition(target);
    let count = pos.len() + neg.len();
    let [n, c, h, w] = pred.shape();
    let mut grad = Grid::zeros(n, c, h, w);
    if count == 0 {
        return Ok(grad);
    }
    let scale = real::<T>(1.0 / count as f64);
    for &i in &pos {
        let x = clamp_pred(pred.data()[i]);
        grad.data_mut()[i] = -scale / x;
    }
    for &i in &neg {
        let x = clamp_pred(pred.data()[i]);
        grad.data_mut()[i] = scale / (T::one() - x);
    }
    Ok(grad)
}

/// Hard-negative-mined BCE: every positive contributes, plus the
/// `min(3 * n_pos, n_neg)` highest-loss negatives. With zero positives the
/// `min(n_neg, 1000)` hardest negatives are used so the loss stays defined
/// on text-free crops.
pub fn bce_ohem_loss<T: Real>(pred: &Grid<T>, target: &LabelMask<T>) -> Result<LossReport<T>> {
    check_loss_shapes(pred, target)?;
    let (pos, neg) = partition(target);
    let keep = if pos.is_empty() {
        neg.len().min(1000)
    } else {
        neg.len().min(3 * pos.len())
    };
    let mut neg_losses: Vec<(T, usize)> = neg
        .iter()
        .map(|&i| (bce_pixel(pred.data()[i], false), i))
        .collect();
    // descending by loss, ties broken by pixel index for reproducibility
    neg_losses.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    neg_losses.truncate(keep);

    let count = pos.len() + neg_losses.len();
    if count == 0 {
        return Ok(LossReport {
            total: T::zero(),
            n_pos: 0,
            n_neg_selected: 0,
        });
    }
    let mut acc = T::zero();
    for &i in &pos {
        acc += bce_pixel(pred.data()[i], true);
    }
    for &(l, _) in &neg_losses {
        acc += l;
    }
    Ok(LossReport {
        total: acc / real::<T>(count as f64),
        n_pos: pos.len(),
        n_neg_selected: neg_losses.len(),
    })
}

/// Indices of the negatives OHEM would select, exposed for tests.
pub fn ohem_selected_negatives<T: Real>(pred: &Grid<T>, target: &LabelMask<T>) -> Result<Vec<usize>> {
    check_loss_shapes(pred, target)?;
    let (pos, neg) = partition(target);
    let keep = if pos.is_empty() {
        neg.len().min(1000)
    } else {
        neg.len().min(3 * pos.len())
    };
    let mut neg_losses: Vec<(T, usize)> = neg
        .iter()
        .map(|&i| (bce_pixel(pred.data()[i], false), i))
        .collect();
    neg_losses.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.1.cmp(&b.1))
    });
    neg_losses.truncate(keep);
    Ok(neg_losses.into_iter().map(|(_, i)| i).collect())
}

/// Focal loss: `-alpha * (1-x)^gamma * ln x` on positives,
/// `-(1-alpha) * x^gamma * ln(1-x)` on negatives; mean over non-ignored
/// pixels.
pub fn focal_loss<T: Real>(pred: &Grid<T>, target: &LabelMask<T>, gamma: T, alpha: T) -> Result<LossReport<T>> {
    check_loss_shapes(pred, target)?;
    if gamma < T::zero() {
        return Err(Error::param("focal: gamma must be >= 0".to_string()));
    }
    if alpha <= T::zero() || alpha >= T::one() {
        return Err(Error::param("focal: alpha must be in (0, 1)".to_string()));
    }
    let (pos, neg) = partition(target);
    let count = pos.len() + neg.len();
    if count == 0 {
        return Ok(LossReport {
            total: T::zero(),
            n_pos: 0,
            n_neg_selected: 0,
        });
    }
    let mut acc = T::zero();
    for &i in &pos {
        let x = clamp_pred(pred.data()[i]);
        acc += -alpha * (T::one() - x).powf(gamma) * x.ln();
    }
    for &i in &neg {
        let x = clamp_pred(pred.data()[i]);
        acc += -(T::one() - alpha) * x.powf(gamma) * (T::one() - x).ln();
    }
    Ok(LossReport {
        total: acc / real::<T>(count as f64),
        n_pos: pos.len(),
        n_neg_selected: neg.len(),
    })
}
