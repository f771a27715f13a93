//! Local context-aware upsampling: a 3x3 convolution predicts a k*k weight
//! kernel per low-resolution position, the kernels are nearest-upsampled to
//! the target resolution, softmax-normalized over the kernel axis, and
//! applied as a weighted gather over the source neighborhood.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::ops;
use crate::Real;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Learnable parameters of the weight-generation branch plus the
/// (upsample rate, local field) configuration.
#[derive(Debug, Clone)]
pub struct LcauParams<T> {
    /// `[k*k, c, 3, 3]` convolution producing one logit per kernel tap.
    pub gen_weights: Grid<T>,
    pub gen_bias: Vec<T>,
    pub r: usize,
    pub k: usize,
}

impl<T: Real> LcauParams<T> {
    fn validate(c: usize, r: usize, k: usize) -> Result<()> {
        if r == 0 {
            return Err(Error::param("lcau: upsample rate must be >= 1".to_string()));
        }
        if k == 0 || k % 2 == 0 {
            return Err(Error::param(format!("lcau: local field k must be odd, got {k}")));
        }
        if c == 0 {
            return Err(Error::param("lcau: channel count must be >= 1".to_string()));
        }
        Ok(())
    }

    /// All-zero parameters: every emitted kernel is uniform `1/k^2`.
    pub fn zeros(c: usize, r: usize, k: usize) -> Result<Self> {
        Self::validate(c, r, k)?;
        Ok(LcauParams {
            gen_weights: Grid::zeros(k * k, c, 3, 3),
            gen_bias: vec![T::zero(); k * k],
            r,
            k,
        })
    }

    /// Deterministic uniform init in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn seeded(c: usize, r: usize, k: usize, seed: u64) -> Result<Self> {
        Self::validate(c, r, k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = 1.0 / ((9 * c) as f64).sqrt();
        let gen_weights = Grid::random(k * k, c, 3, 3, -s, s, &mut rng);
        let gen_bias = (0..k * k).map(|_| crate::real::<T>(rng.gen_range(-s..s))).collect();
        Ok(LcauParams {
            gen_weights,
            gen_bias,
            r,
            k,
        })
    }

    pub fn channels(&self) -> usize {
        self.gen_weights.shape()[1]
    }
}

/// Normalized per-position kernels: conv3x3 -> nearest upsample -> softmax.
/// Every spatial location of the output holds a k*k kernel summing to 1.
pub fn lcau_weights<T: Real>(input: &Grid<T>, params: &LcauParams<T>) -> Result<Grid<T>> {
    let logits = ops::conv3x3_forward(input, &params.gen_weights, &params.gen_bias)?;
    let up = ops::nearest_upsample(&logits, params.r)?;
    ops::channel_softmax(&up)
}

fn check_reassembly_shapes<T: Real>(input: &Grid<T>, weights: &Grid<T>, r: usize, k: usize) -> Result<()> {
    let [n, _, h, w] = input.shape();
    let [wn, wc, wh, ww] = weights.shape();
    if r == 0 || k == 0 || k % 2 == 0 {
        return Err(Error::param(format!("reassembly: bad r={r} or k={k}")));
    }
    if wn != n || wc != k * k || wh != h * r || ww != w * r {
        return Err(Error::shape(format!(
            "reassembly: weights {:?} inconsistent with input {:?}, r={r}, k={k}",
            weights.shape(),
            input.shape()
        )));
    }
    Ok(())
}

/// Weighted gather: each output value is the kernel-weighted sum over the
/// k*k source window centered at the corresponding low-resolution position.
/// Out-of-frame source values are treated as zero.
pub fn local_reassembly<T: Real>(input: &Grid<T>, weights: &Grid<T>, r: usize, k: usize) -> Result<Grid<T>> {
    check_reassembly_shapes(input, weights, r, k)?;
    let [n, c, h, w] = input.shape();
    let half = (k / 2) as isize;
    let mut out = Grid::zeros(n, c, h * r, w * r);
    for ni in 0..n {
        for y in 0..h * r {
            for x in 0..w * r {
                let (sy, sx) = ((y / r) as isize, (x / r) as isize);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            let wv = weights.at(ni, dy * k + dx, y, x);
                            acc += wv
                                * input.at_padded(ni, ci, sy + dy as isize - half, sx + dx as isize - half);
                        }
                    }
                    *out.at_mut(ni, ci, y, x) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Cotangents of [`local_reassembly`]: `(grad_input, grad_weights)`.
pub fn local_reassembly_backward<T: Real>(
    grad_out: &Grid<T>,
    input: &Grid<T>,
    weights: &Grid<T>,
    r: usize,
    k: usize,
) -> Result<(Grid<T>, Grid<T>)> {
    check_reassembly_shapes(input, weights, r, k)?;
    let [n, c, h, w] = input.shape();
    grad_out.require_shape([n, c, h * r, w * r], "reassembly backward: grad_out")?;
    let half = (k / 2) as isize;
    let mut grad_input = Grid::zeros(n, c, h, w);
    let mut grad_weights = Grid::zeros(n, k * k, h * r, w * r);
    for ni in 0..n {
        for y in 0..h * r {
            for x in 0..w * r {
                let (sy, sx) = ((y / r) as isize, (x / r) as isize);
                for dy in 0..k {
                    for dx in 0..k {
                        let iy = sy + dy as isize - half;
                        let ix = sx + dx as isize - half;
                        let wv = weights.at(ni, dy * k + dx, y, x);
                        let mut wgrad = T::zero();
                        for ci in 0..c {
                            let g = grad_out.at(ni, ci, y, x);
                            wgrad += g * input.at_padded(ni, ci, iy, ix);
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                *grad_input.at_mut(ni, ci, iy as usize, ix as usize) += g * wv;
                            }
                        }
                        *grad_weights.at_mut(ni, dy * k + dx, y, x) = wgrad;
                    }
                }
            }
        }
    }
    Ok((grad_input, grad_weights))
}

/// Everything the backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct LcauContext<T> {
    pub input: Grid<T>,
    /// Normalized weights, i.e. the softmax output.
    pub weights: Grid<T>,
}

#[derive(Debug, Clone)]
pub struct LcauGrads<T> {
    pub grad_input: Grid<T>,
    pub grad_gen_weights: Grid<T>,
    pub grad_gen_bias: Vec<T>,
}

pub fn lcau_forward<T: Real>(input: &Grid<T>, params: &LcauParams<T>) -> Result<(Grid<T>, LcauContext<T>)> {
    let weights = lcau_weights(input, params)?;
    let out = local_reassembly(input, &weights, params.r, params.k)?;
    Ok((
        out,
        LcauContext {
            input: input.clone(),
            weights,
        },
    ))
}

/// Backward through both branches: the reassembly path and the
/// weight-generation path (softmax, nearest upsample, conv).
pub fn lcau_backward<T: Real>(
    grad_out: &Grid<T>,
    params: &LcauParams<T>,
    ctx: &LcauContext<T>,
) -> Result<LcauGrads<T>> {
    let (mut grad_input, grad_w) =
        local_reassembly_backward(grad_out, &ctx.input, &ctx.weights, params.r, params.k)?;
    let grad_logits_up = ops::channel_softmax_backward(&grad_w, &ctx.weights)?;
    let [n, _, h, w] = ctx.input.shape();
    let grad_logits =
        ops::nearest_upsample_backward(&grad_logits_up, [n, params.k * params.k, h, w], params.r)?;
    let (grad_input_gen, grad_gen_weights, grad_gen_bias) =
        ops::conv3x3_backward(&grad_logits, &ctx.input, &params.gen_weights)?;
    grad_input.add_assign(&grad_input_gen)?;
    Ok(LcauGrads {
        grad_input,
        grad_gen_weights,
        grad_gen_bias,
    })
}

/// The upsampling operators compared in the ablation over operator choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum UpsamplerKind {
    Nearest,
    Bilinear,
    Deconvolution,
    PixelShuffle,
    Lcau,
}

impl UpsamplerKind {
    pub const ALL: [UpsamplerKind; 5] = [
        UpsamplerKind::Nearest,
        UpsamplerKind::Bilinear,
        UpsamplerKind::Deconvolution,
        UpsamplerKind::PixelShuffle,
        UpsamplerKind::Lcau,
    ];
}

impl std::str::FromStr for UpsamplerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nearest" => Ok(UpsamplerKind::Nearest),
            "bilinear" => Ok(UpsamplerKind::Bilinear),
            "deconv" | "deconvolution" => Ok(UpsamplerKind::Deconvolution),
            "pixelshuffle" | "pixel-shuffle" => Ok(UpsamplerKind::PixelShuffle),
            "lcau" => Ok(UpsamplerKind::Lcau),
            other => Err(Error::param(format!("unknown upsampler kind: {other}"))),
        }
    }
}

/// Parameters for the kinds that need them.
#[derive(Debug, Clone)]
pub enum UpsamplerParams<T> {
    Deconv { weights: Grid<T>, bias: Vec<T> },
    Lcau(LcauParams<T>),
}

/// Uniform dispatch over the operator ablation. `params` is required for
/// `Deconvolution` and `Lcau`.
pub fn upsample<T: Real>(
    kind: UpsamplerKind,
    input: &Grid<T>,
    r: usize,
    params: Option<&UpsamplerParams<T>>,
) -> Result<Grid<T>> {
    match (kind, params) {
        (UpsamplerKind::Nearest, _) => ops::nearest_upsample(input, r),
        (UpsamplerKind::Bilinear, _) => ops::bilinear_upsample(input, r),
        (UpsamplerKind::PixelShuffle, _) => ops::pixel_shuffle(input, r),
        (UpsamplerKind::Deconvolution, Some(UpsamplerParams::Deconv { weights, bias })) => {
            ops::deconv_upsample(input, weights, bias, r)
        }
        (UpsamplerKind::Lcau, Some(UpsamplerParams::Lcau(p))) => {
            if p.r != r {
                return Err(Error::param(format!("lcau params built for r={}, requested r={r}", p.r)));
            }
            lcau_forward(input, p).map(|(out, _)| out)
        }
        (UpsamplerKind::Deconvolution, _) | (UpsamplerKind::Lcau, _) => {
            Err(Error::param(format!("{kind:?} requires parameters")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Grid64;
    

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_params_give_uniform_kernels() {
        let params = LcauParams::<f64>::zeros(2, 2, 3).unwrap();
        let input = Grid64::random(1, 2, 3, 3, -1.0, 1.0, &mut rng(1));
        let w = lcau_weights(&input, &params).unwrap();
        for &v in w.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturating_center_bias_gives_one_hot_kernels() {
        let k = 3usize;
        let mut params = LcauParams::<f64>::zeros(1, 2, k).unwrap();
        let center = (k / 2) * k + k / 2;
        params.gen_bias[center] = 40.0;
        let input = Grid64::random(1, 1, 3, 3, -1.0, 1.0, &mut rng(2));
        let w = lcau_weights(&input, &params).unwrap();
        for y in 0..w.h() {
            for x in 0..w.w() {
                assert!(w.at(0, center, y, x) >= 1.0 - 1e-6);
            }
        }
    }

    #[test]
    fn kernels_identical_within_each_block() {
        let params = LcauParams::<f64>::seeded(2, 2, 3, 11).unwrap();
        let input = Grid64::random(1, 2, 3, 4, -1.0, 1.0, &mut rng(3));
        let w = lcau_weights(&input, &params).unwrap();
        for c in 0..9 {
            for y in 0..3 {
                for x in 0..4 {
                    let base = w.at(0, c, 2 * y, 2 * x);
                    assert_eq!(w.at(0, c, 2 * y + 1, 2 * x), base);
                    assert_eq!(w.at(0, c, 2 * y, 2 * x + 1), base);
                    assert_eq!(w.at(0, c, 2 * y + 1, 2 * x + 1), base);
                }
            }
        }
    }

    #[test]
    fn kernels_sum_to_one() {
        let params = LcauParams::<f64>::seeded(2, 2, 5, 4).unwrap();
        let input = Grid64::random(1, 2, 3, 3, -2.0, 2.0, &mut rng(5));
        let w = lcau_weights(&input, &params).unwrap();
        for y in 0..w.h() {
            for x in 0..w.w() {
                let s: f64 = (0..25).map(|c| w.at(0, c, y, x)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_weights_on_constant_interior() {
        // constant input, interior outputs are convex combos of equal values
        let input = Grid64::full(1, 1, 5, 5, 3.5);
        let weights = Grid64::full(1, 9, 10, 10, 1.0 / 9.0);
        let out = local_reassembly(&input, &weights, 2, 3).unwrap();
        for y in 2..8 {
            for x in 2..8 {
                assert!((out.at(0, 0, y, x) - 3.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_center_weights_reduce_to_nearest() {
        let (r, k) = (2usize, 3usize);
        let input = Grid64::random(1, 2, 3, 4, -1.0, 1.0, &mut rng(6));
        let mut weights = Grid64::zeros(1, k * k, 6, 8);
        let center = (k / 2) * k + k / 2;
        for y in 0..6 {
            for x in 0..8 {
                *weights.at_mut(0, center, y, x) = 1.0;
            }
        }
        let out = local_reassembly(&input, &weights, r, k).unwrap();
        let nearest = ops::nearest_upsample(&input, r).unwrap();
        assert_eq!(out, nearest);
    }

    #[test]
    fn reassembly_matches_nested_loop_oracle() {
        let (r, k) = (2usize, 3usize);
        let mut rng = rng(7);
        let input = Grid64::random(1, 2, 3, 3, -1.0, 1.0, &mut rng);
        // random normalized weights
        let mut weights = Grid64::random(1, k * k, 6, 6, 0.01, 1.0, &mut rng);
        for y in 0..6 {
            for x in 0..6 {
                let s: f64 = (0..k * k).map(|c| weights.at(0, c, y, x)).sum();
                for c in 0..k * k {
                    *weights.at_mut(0, c, y, x) /= s;
                }
            }
        }
        let out = local_reassembly(&input, &weights, r, k).unwrap();
        // independent direct evaluation
        for c in 0..2 {
            for y in 0..6usize {
                for x in 0..6usize {
                    let mut expect = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = (y / r) as isize + dy as isize - 1;
                            let ix = (x / r) as isize + dx as isize - 1;
                            let v = if iy < 0 || ix < 0 || iy >= 3 || ix >= 3 {
                                0.0
                            } else {
                                input.at(0, c, iy as usize, ix as usize)
                            };
                            expect += weights.at(0, dy * k + dx, y, x) * v;
                        }
                    }
                    assert_eq!(out.at(0, c, y, x), expect);
                }
            }
        }
    }

    #[test]
    fn forward_shape_contract() {
        let params = LcauParams::<f64>::seeded(64, 2, 5, 0).unwrap();
        let input = Grid64::random(1, 64, 20, 20, -1.0, 1.0, &mut rng(8));
        let (out, _) = lcau_forward(&input, &params).unwrap();
        assert_eq!(out.shape(), [1, 64, 40, 40]);
    }

    #[test]
    fn r1_saturating_center_bias_recovers_input() {
        let mut params = LcauParams::<f64>::zeros(2, 1, 3).unwrap();
        params.gen_bias[4] = 40.0;
        let input = Grid64::random(1, 2, 4, 4, -1.0, 1.0, &mut rng(9));
        let (out, _) = lcau_forward(&input, &params).unwrap();
        for (a, b) in out.data().iter().zip(input.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let params = LcauParams::<f64>::seeded(2, 2, 3, 1).unwrap();
        let input = Grid64::random(1, 2, 3, 3, -1.0, 1.0, &mut rng(10));
        let (out, ctx) = lcau_forward(&input, &params).unwrap();
        let [n, c, h, w] = out.shape();
        let grads = lcau_backward(&Grid64::zeros(n, c, h, w), &params, &ctx).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_gen_weights.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_gen_bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convexity_of_outputs() {
        let params = LcauParams::<f64>::seeded(1, 2, 3, 21).unwrap();
        let input = Grid64::random(1, 1, 4, 4, -1.0, 1.0, &mut rng(22));
        let (out, _) = lcau_forward(&input, &params).unwrap();
        for y in 0..8usize {
            for x in 0..8usize {
                let (sy, sx) = ((y / 2) as isize, (x / 2) as isize);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let v = input.at_padded(0, 0, sy + dy, sx + dx);
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                let v = out.at(0, 0, y, x);
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_seeding() {
        let a = LcauParams::<f64>::seeded(3, 2, 5, 42).unwrap();
        let b = LcauParams::<f64>::seeded(3, 2, 5, 42).unwrap();
        assert_eq!(a.gen_weights, b.gen_weights);
        assert_eq!(a.gen_bias, b.gen_bias);
        let c = LcauParams::<f64>::seeded(3, 2, 5, 43).unwrap();
        assert_ne!(a.gen_weights, c.gen_weights);
    }

    #[test]
    fn dispatch_contracts() {
        let mut r = rng(30);
        let input = Grid64::random(1, 4, 3, 3, -1.0, 1.0, &mut r);
        let nearest = upsample(UpsamplerKind::Nearest, &input, 2, None).unwrap();
        assert_eq!(nearest, ops::nearest_upsample(&input, 2).unwrap());
        assert!(upsample(UpsamplerKind::Lcau, &input, 2, None).is_err());
        assert!(upsample(UpsamplerKind::Deconvolution, &input, 2, None).is_err());

        let lcau_params = UpsamplerParams::Lcau(LcauParams::seeded(4, 2, 3, 9).unwrap());
        let deconv_params = UpsamplerParams::Deconv {
            weights: Grid64::random(4, 4, 4, 4, -0.5, 0.5, &mut r),
            bias: vec![0.0; 4],
        };
        for (kind, p) in [
            (UpsamplerKind::Nearest, None),
            (UpsamplerKind::Bilinear, None),
            (UpsamplerKind::PixelShuffle, None),
            (UpsamplerKind::Deconvolution, Some(&deconv_params)),
            (UpsamplerKind::Lcau, Some(&lcau_params)),
        ] {
            let out = upsample(kind, &input, 2, p).unwrap();
            assert_eq!(out.h(), 6);
            assert_eq!(out.w(), 6);
        }
    }

    #[test]
    fn zero_param_lcau_is_box_filtered_nearest() {
        let (r, k) = (2usize, 3usize);
        let params = LcauParams::<f64>::zeros(2, r, k).unwrap();
        let input = Grid64::random(1, 2, 3, 3, -1.0, 1.0, &mut rng(31));
        let (out, _) = lcau_forward(&input, &params).unwrap();
        for c in 0..2 {
            for y in 0..6usize {
                for x in 0..6usize {
                    let (sy, sx) = ((y / r) as isize, (x / r) as isize);
                    let mut expect = 0.0;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            expect += input.at_padded(0, c, sy + dy, sx + dx);
                        }
                    }
                    expect /= (k * k) as f64;
                    assert!((out.at(0, c, y, x) - expect).abs() < 1e-12);
                }
            }
        }
    }
}
