//! Primitive operators composed by the upsampling pipeline, each with a
//! hand-derived backward pass. All of them are pure functions; gradients are
//! returned to the caller rather than accumulated internally.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::Real;

/// 3x3 cross-correlation, stride 1, zero padding 1. Output spatial extents
/// equal the input's. `weights` is `[c_out, c_in, 3, 3]`.
pub fn conv3x3_forward<T: Real>(input: &Grid<T>, weights: &Grid<T>, bias: &[T]) -> Result<Grid<T>> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, kh, kw] = weights.shape();
    if kh != 3 || kw != 3 {
        return Err(Error::shape(format!("conv3x3: kernel must be 3x3, got {kh}x{kw}")));
    }
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "conv3x3: input has {c_in} channels, weights expect {wc_in}"
        )));
    }
    if bias.len() != c_out {
        return Err(Error::shape(format!(
            "conv3x3: bias length {} vs {c_out} output channels",
            bias.len()
        )));
    }
    let mut out = Grid::zeros(n, c_out, h, w);
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..c_in {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                let sx = x as isize + dx as isize - 1;
                                acc += weights.at(co, ci, dy, dx) * input.at_padded(ni, ci, sy, sx);
                            }
                        }
                    }
                    *out.at_mut(ni, co, y, x) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Cotangents of [`conv3x3_forward`]: `(grad_input, grad_weights, grad_bias)`.
pub fn conv3x3_backward<T: Real>(
    grad_out: &Grid<T>,
    input: &Grid<T>,
    weights: &Grid<T>,
) -> Result<(Grid<T>, Grid<T>, Vec<T>)> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, _, _] = weights.shape();
    if wc_in != c_in {
        return Err(Error::shape("conv3x3 backward: channel mismatch".to_string()));
    }
    grad_out.require_shape([n, c_out, h, w], "conv3x3 backward: grad_out")?;

    let mut grad_input = Grid::zeros(n, c_in, h, w);
    let mut grad_weights = Grid::zeros(c_out, c_in, 3, 3);
    let mut grad_bias = vec![T::zero(); c_out];

    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h {
                for x in 0..w {
                    let g = grad_out.at(ni, co, y, x);
                    grad_bias[co] += g;
                    for ci in 0..c_in {
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let sy = y as isize + dy as isize - 1;
                                let sx = x as isize + dx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    let sy = sy as usize;
                                    let sx = sx as usize;
                                    *grad_input.at_mut(ni, ci, sy, sx) += weights.at(co, ci, dy, dx) * g;
                                    *grad_weights.at_mut(co, ci, dy, dx) += input.at(ni, ci, sy, sx) * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// Nearest-neighbor upsampling by an integer rate.
pub fn nearest_upsample<T: Real>(input: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c, h, w] = input.shape();
    let mut out = Grid::zeros(n, c, h * r, w * r);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h * r {
                for x in 0..w * r {
                    *out.at_mut(ni, ci, y, x) = input.at(ni, ci, y / r, x / r);
                }
            }
        }
    }
    Ok(out)
}

/// Backward of nearest upsampling: each source cell collects its r x r block.
pub fn nearest_upsample_backward<T: Real>(grad_out: &Grid<T>, input_shape: [usize; 4], r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c, h, w] = input_shape;
    grad_out.require_shape([n, c, h * r, w * r], "nearest backward: grad_out")?;
    let mut grad_in = Grid::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h * r {
                for x in 0..w * r {
                    *grad_in.at_mut(ni, ci, y / r, x / r) += grad_out.at(ni, ci, y, x);
                }
            }
        }
    }
    Ok(grad_in)
}

#[inline]
fn bilinear_taps<T: Real>(dst: usize, r: usize, extent: usize) -> (usize, usize, T) {
    // align-corners-false sampling with edge clamping
    let src = (dst as f64 + 0.5) / r as f64 - 0.5;
    let src = src.clamp(0.0, (extent - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(extent - 1);
    (i0, i1, crate::real::<T>(src - i0 as f64))
}

/// Bilinear upsampling by an integer rate, align-corners-false convention.
pub fn bilinear_upsample<T: Real>(input: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c, h, w] = input.shape();
    let mut out = Grid::zeros(n, c, h * r, w * r);
    for y in 0..h * r {
        let (y0, y1, fy) = bilinear_taps::<T>(y, r, h);
        for x in 0..w * r {
            let (x0, x1, fx) = bilinear_taps::<T>(x, r, w);
            for ni in 0..n {
                for ci in 0..c {
                    let top = input.at(ni, ci, y0, x0) * (T::one() - fx) + input.at(ni, ci, y0, x1) * fx;
                    let bot = input.at(ni, ci, y1, x0) * (T::one() - fx) + input.at(ni, ci, y1, x1) * fx;
                    *out.at_mut(ni, ci, y, x) = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_upsample_backward<T: Real>(grad_out: &Grid<T>, input_shape: [usize; 4], r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c, h, w] = input_shape;
    grad_out.require_shape([n, c, h * r, w * r], "bilinear backward: grad_out")?;
    let mut grad_in = Grid::zeros(n, c, h, w);
    for y in 0..h * r {
        let (y0, y1, fy) = bilinear_taps::<T>(y, r, h);
        for x in 0..w * r {
            let (x0, x1, fx) = bilinear_taps::<T>(x, r, w);
            for ni in 0..n {
                for ci in 0..c {
                    let g = grad_out.at(ni, ci, y, x);
                    *grad_in.at_mut(ni, ci, y0, x0) += g * (T::one() - fy) * (T::one() - fx);
                    *grad_in.at_mut(ni, ci, y0, x1) += g * (T::one() - fy) * fx;
                    *grad_in.at_mut(ni, ci, y1, x0) += g * fy * (T::one() - fx);
                    *grad_in.at_mut(ni, ci, y1, x1) += g * fy * fx;
                }
            }
        }
    }
    Ok(grad_in)
}

/// Softmax over the channel axis at every spatial location, computed with
/// max-subtraction.
pub fn channel_softmax<T: Real>(input: &Grid<T>) -> Result<Grid<T>> {
    let [n, c, h, w] = input.shape();
    if c == 0 {
        return Err(Error::shape("channel_softmax: zero channels".to_string()));
    }
    let mut out = Grid::zeros(n, c, h, w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut m = input.at(ni, 0, y, x);
                for ci in 1..c {
                    m = m.max(input.at(ni, ci, y, x));
                }
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (input.at(ni, ci, y, x) - m).exp();
                    *out.at_mut(ni, ci, y, x) = e;
                    z += e;
                }
                for ci in 0..c {
                    *out.at_mut(ni, ci, y, x) /= z;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of channel softmax given its own output.
pub fn channel_softmax_backward<T: Real>(grad_out: &Grid<T>, softmax_out: &Grid<T>) -> Result<Grid<T>> {
    let [n, c, h, w] = softmax_out.shape();
    grad_out.require_shape([n, c, h, w], "softmax backward: grad_out")?;
    let mut grad_in = Grid::zeros(n, c, h, w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = T::zero();
                for ci in 0..c {
                    dot += grad_out.at(ni, ci, y, x) * softmax_out.at(ni, ci, y, x);
                }
                for ci in 0..c {
                    let s = softmax_out.at(ni, ci, y, x);
                    *grad_in.at_mut(ni, ci, y, x) = s * (grad_out.at(ni, ci, y, x) - dot);
                }
            }
        }
    }
    Ok(grad_in)
}

fn deconv_crop(r: usize) -> usize {
    // full output is r*h + r; the centered r*h window starts at r/2
    r / 2
}

/// Transposed convolution with kernel size `2r`, stride `r`, output cropped
/// to exactly `(r*h, r*w)`. `weights` is `[c_in, c_out, 2r, 2r]`.
pub fn deconv_upsample<T: Real>(input: &Grid<T>, weights: &Grid<T>, bias: &[T], r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c_in, h, w] = input.shape();
    let [wc_in, c_out, kh, kw] = weights.shape();
    if wc_in != c_in || kh != 2 * r || kw != 2 * r {
        return Err(Error::shape(format!(
            "deconv: weights {:?} incompatible with input channels {c_in} and rate {r}",
            weights.shape()
        )));
    }
    if bias.len() != c_out {
        return Err(Error::shape("deconv: bias length mismatch".to_string()));
    }
    let crop = deconv_crop(r);
    let mut out = Grid::full(n, c_out, h * r, w * r, T::zero());
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h * r {
                for x in 0..w * r {
                    *out.at_mut(ni, co, y, x) = bias[co];
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..w {
                    let v = input.at(ni, ci, iy, ix);
                    for co in 0..c_out {
                        for ky in 0..2 * r {
                            for kx in 0..2 * r {
                                let oy = (r * iy + ky) as isize - crop as isize;
                                let ox = (r * ix + kx) as isize - crop as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < h * r && (ox as usize) < w * r {
                                    *out.at_mut(ni, co, oy as usize, ox as usize) +=
                                        v * weights.at(ci, co, ky, kx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv_upsample_backward<T: Real>(
    grad_out: &Grid<T>,
    input: &Grid<T>,
    weights: &Grid<T>,
    r: usize,
) -> Result<(Grid<T>, Grid<T>, Vec<T>)> {
    let [n, c_in, h, w] = input.shape();
    let [_, c_out, _, _] = weights.shape();
    grad_out.require_shape([n, c_out, h * r, w * r], "deconv backward: grad_out")?;
    let crop = deconv_crop(r);
    let mut grad_input = Grid::zeros(n, c_in, h, w);
    let mut grad_weights = Grid::zeros(c_in, c_out, 2 * r, 2 * r);
    let mut grad_bias = vec![T::zero(); c_out];
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..h * r {
                for x in 0..w * r {
                    grad_bias[co] += grad_out.at(ni, co, y, x);
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..c_in {
            for iy in 0..h {
                for ix in 0..w {
                    let v = input.at(ni, ci, iy, ix);
                    let mut acc = T::zero();
                    for co in 0..c_out {
                        for ky in 0..2 * r {
                            for kx in 0..2 * r {
                                let oy = (r * iy + ky) as isize - crop as isize;
                                let ox = (r * ix + kx) as isize - crop as isize;
                                if oy >= 0 && ox >= 0 && (oy as usize) < h * r && (ox as usize) < w * r {
                                    let g = grad_out.at(ni, co, oy as usize, ox as usize);
                                    acc += g * weights.at(ci, co, ky, kx);
                                    *grad_weights.at_mut(ci, co, ky, kx) += g * v;
                                }
                            }
                        }
                    }
                    *grad_input.at_mut(ni, ci, iy, ix) = acc;
                }
            }
        }
    }
    Ok((grad_input, grad_weights, grad_bias))
}

/// Rearranges `[n, c*r*r, h, w]` into `[n, c, r*h, r*w]`: depth channel
/// `c*r*r + dy*r + dx` lands at spatial offset `(dy, dx)` within each block.
pub fn pixel_shuffle<T: Real>(input: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c_in, h, w] = input.shape();
    if c_in % (r * r) != 0 {
        return Err(Error::shape(format!(
            "pixel_shuffle: {c_in} channels not divisible by r^2 = {}",
            r * r
        )));
    }
    let c = c_in / (r * r);
    let mut out = Grid::zeros(n, c, h * r, w * r);
    for ni in 0..n {
        for co in 0..c {
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ci = co * r * r + dy * r + dx;
                            *out.at_mut(ni, co, y * r + dy, x * r + dx) = input.at(ni, ci, y, x);
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pixel_shuffle_backward<T: Real>(grad_out: &Grid<T>, r: usize) -> Result<Grid<T>> {
    if r == 0 {
        return Err(Error::param("upsample rate must be >= 1".to_string()));
    }
    let [n, c, hr, wr] = grad_out.shape();
    if hr % r != 0 || wr % r != 0 {
        return Err(Error::shape("pixel_shuffle backward: extents not divisible by r".to_string()));
    }
    let (h, w) = (hr / r, wr / r);
    let mut grad_in = Grid::zeros(n, c * r * r, h, w);
    for ni in 0..n {
        for co in 0..c {
            for y in 0..h {
                for x in 0..w {
                    for dy in 0..r {
                        for dx in 0..r {
                            let ci = co * r * r + dy * r + dx;
                            *grad_in.at_mut(ni, ci, y, x) = grad_out.at(ni, co, y * r + dy, x * r + dx);
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Non-overlapping strided convolution with kernel size == stride. Used to
/// synthesize pyramid features from images; not part of the gradient suite.
pub fn strided_conv<T: Real>(input: &Grid<T>, weights: &Grid<T>, stride: usize) -> Result<Grid<T>> {
    let [n, c_in, h, w] = input.shape();
    let [c_out, wc_in, kh, kw] = weights.shape();
    if wc_in != c_in || kh != stride || kw != stride {
        return Err(Error::shape("strided_conv: weights incompatible".to_string()));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(format!(
            "strided_conv: extents {h}x{w} not divisible by stride {stride}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Grid::zeros(n, c_out, oh, ow);
    for ni in 0..n {
        for co in 0..c_out {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..c_in {
                        for ky in 0..stride {
                            for kx in 0..stride {
                                acc += weights.at(co, ci, ky, kx)
                                    * input.at(ni, ci, y * stride + ky, x * stride + kx);
                            }
                        }
                    }
                    *out.at_mut(ni, co, y, x) = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Grid64;

    #[test]
    fn conv3x3_all_ones_center_and_corner() {
        let input = Grid64::full(1, 1, 3, 3, 1.0);
        let weights = Grid64::full(1, 1, 3, 3, 1.0);
        let out = conv3x3_forward(&input, &weights, &[0.0]).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn conv3x3_identity_kernel() {
        let input = Grid64::from_vec(1, 1, 2, 3, vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let mut weights = Grid64::zeros(1, 1, 3, 3);
        *weights.at_mut(0, 0, 1, 1) = 1.0;
        let out = conv3x3_forward(&input, &weights, &[0.0]).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv3x3_zero_input_yields_bias() {
        let input = Grid64::zeros(1, 2, 3, 3);
        let weights = Grid64::full(1, 2, 3, 3, 0.7);
        let out = conv3x3_forward(&input, &weights, &[2.5]).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn conv3x3_channel_mismatch_is_error() {
        let input = Grid64::zeros(1, 2, 3, 3);
        let weights = Grid64::zeros(1, 3, 3, 3);
        assert!(conv3x3_forward(&input, &weights, &[0.0]).is_err());
    }

    #[test]
    fn conv3x3_backward_identity_kernel_passes_grad() {
        let input = Grid64::full(1, 1, 3, 3, 0.5);
        let mut weights = Grid64::zeros(1, 1, 3, 3);
        *weights.at_mut(0, 0, 1, 1) = 1.0;
        let grad_out = Grid64::from_vec(1, 1, 3, 3, (0..9).map(|v| v as f64).collect()).unwrap();
        let (gi, _, gb) = conv3x3_backward(&grad_out, &input, &weights).unwrap();
        assert_eq!(gi, grad_out);
        assert_eq!(gb[0], 36.0);
    }

    #[test]
    fn nearest_r1_is_identity_and_r0_errors() {
        let input = Grid64::from_vec(1, 1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(nearest_upsample(&input, 1).unwrap(), input);
        assert!(nearest_upsample(&input, 0).is_err());
    }

    #[test]
    fn nearest_duplicates_blocks() {
        let input = Grid64::from_vec(1, 1, 1, 2, vec![7.0, 9.0]).unwrap();
        let out = nearest_upsample(&input, 2).unwrap();
        assert_eq!(out.data(), &[7.0, 7.0, 9.0, 9.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn nearest_roundtrip_subsample() {
        let input = Grid64::from_vec(1, 2, 2, 2, (0..8).map(|v| v as f64).collect()).unwrap();
        let out = nearest_upsample(&input, 3).unwrap();
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(out.at(0, c, 3 * y, 3 * x), input.at(0, c, y, x));
                }
            }
        }
    }

    #[test]
    fn bilinear_row_case() {
        let input = Grid64::from_vec(1, 1, 1, 2, vec![0.0, 1.0]).unwrap();
        let out = bilinear_upsample(&input, 2).unwrap();
        let row: Vec<f64> = (0..4).map(|x| out.at(0, 0, 0, x)).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let input = Grid64::full(1, 2, 3, 3, 4.2);
        let out = bilinear_upsample(&input, 3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 4.2).abs() < 1e-12));
        let input = Grid64::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_upsample(&input, 1).unwrap(), input);
    }

    #[test]
    fn softmax_sums_to_one_and_matches_direct_formula() {
        let input = Grid64::from_vec(1, 3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let out = channel_softmax(&input).unwrap();
        let z: f64 = 1f64.exp() + 2f64.exp() + 3f64.exp();
        for c in 0..3 {
            assert!((out.at(0, c, 0, 0) - ((c + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let s: f64 = out.data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_single_channel_and_symmetry() {
        let input = Grid64::full(1, 1, 2, 2, -3.0);
        let out = channel_softmax(&input).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
        let input = Grid64::zeros(1, 2, 1, 1);
        let out = channel_softmax(&input).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_shift_invariance() {
        let input = Grid64::from_vec(1, 3, 1, 1, vec![0.3, -1.2, 2.0]).unwrap();
        let shifted = input.map(|v| v + 17.0);
        let a = channel_softmax(&input).unwrap();
        let b = channel_softmax(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_shuffle_definition_case() {
        let input = Grid64::from_vec(1, 4, 1, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pixel_shuffle(&input, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn pixel_shuffle_r1_identity_and_indivisible_error() {
        let input = Grid64::from_vec(1, 2, 1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(pixel_shuffle(&input, 1).unwrap(), input);
        assert!(pixel_shuffle(&input, 2).is_err());
    }

    #[test]
    fn deconv_ones_kernel_single_pixel() {
        let input = Grid64::from_vec(1, 1, 1, 1, vec![5.0]).unwrap();
        let weights = Grid64::full(1, 1, 4, 4, 1.0);
        let out = deconv_upsample(&input, &weights, &[0.0], 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn strided_conv_shapes() {
        let input = Grid64::full(1, 3, 8, 8, 1.0);
        let weights = Grid64::full(4, 3, 4, 4, 0.5);
        let out = strided_conv(&input, &weights, 4).unwrap();
        assert_eq!(out.shape(), [1, 4, 2, 2]);
        assert!(out.data().iter().all(|&v| (v - 24.0).abs() < 1e-12));
    }
}
