//! Decoder shape contract: C2-C5 pyramid features are upsampled to C2 scale
//! with the configured operator, channel-concatenated, projected back to the
//! working channel count, upsampled to image scale and squashed to a single
//! probability channel. Parameters are randomly initialized; the module
//! serves shape and gradient verification, not trained inference.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::lcau::{self, LcauContext, LcauParams, UpsamplerKind};
use crate::ops;
use crate::{real, Real};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Backbone feature maps at strides 4, 8, 16, 32 relative to the image.
#[derive(Debug, Clone)]
pub struct Pyramid<T> {
    pub c2: Grid<T>,
    pub c3: Grid<T>,
    pub c4: Grid<T>,
    pub c5: Grid<T>,
}

impl<T: Real> Pyramid<T> {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let [n, c, h, w] = self.c2.shape();
        if c != channels {
            return Err(Error::shape(format!("pyramid: c2 has {c} channels, expected {channels}")));
        }
        for (name, level, grid) in [("c3", 1usize, &self.c3), ("c4", 2, &self.c4), ("c5", 3, &self.c5)] {
            let div = 1 << level;
            if h % div != 0 || w % div != 0 {
                return Err(Error::shape(format!("pyramid: c2 extents {h}x{w} not divisible by {div}")));
            }
            grid.require_shape([n, channels, h / div, w / div], name)?;
        }
        Ok(())
    }
}

/// Where LCAU replaces the plain upsampler when `upsampler == Lcau`:
/// only in the pyramid aggregation, or also in the final x4 decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LcauPlacement {
    FpnOnly,
    All,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DecoderConfig {
    pub channels: usize,
    pub upsampler: UpsamplerKind,
    pub lcau_placement: LcauPlacement,
    pub lcau_k: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            channels: 64,
            upsampler: UpsamplerKind::Lcau,
            lcau_placement: LcauPlacement::All,
            lcau_k: 5,
        }
    }
}

/// One x2 upsampling stage. Pixel shuffle is preceded by a channel-expanding
/// convolution so every stage maps C channels to C channels.
#[derive(Debug, Clone)]
pub enum UpStage<T> {
    Nearest,
    Bilinear,
    Deconv { weights: Grid<T>, bias: Vec<T> },
    SubPixel { weights: Grid<T>, bias: Vec<T> },
    Lcau(LcauParams<T>),
}

#[derive(Debug, Clone)]
pub enum StageCtx<T> {
    Plain { input_shape: [usize; 4] },
    WithInput { input: Grid<T> },
    Lcau(LcauContext<T>),
}

fn uniform_grid<T: Real>(rng: &mut ChaCha8Rng, shape: [usize; 4], fan_in: usize) -> Grid<T> {
    let s = 1.0 / (fan_in as f64).sqrt();
    Grid::random(shape[0], shape[1], shape[2], shape[3], -s, s, rng)
}

fn uniform_vec<T: Real>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<T> {
    use rand::Rng;
    let s = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| real::<T>(rng.gen_range(-s..s))).collect()
}

impl<T: Real> UpStage<T> {
    fn build(kind: UpsamplerKind, channels: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match kind {
            UpsamplerKind::Nearest => UpStage::Nearest,
            UpsamplerKind::Bilinear => UpStage::Bilinear,
            UpsamplerKind::Deconvolution => UpStage::Deconv {
                weights: uniform_grid(rng, [channels, channels, 4, 4], channels * 16),
                bias: vec![T::zero(); channels],
            },
            UpsamplerKind::PixelShuffle => UpStage::SubPixel {
                weights: uniform_grid(rng, [channels * 4, channels, 3, 3], channels * 9),
                bias: uniform_vec(rng, channels * 4, channels * 9),
            },
            UpsamplerKind::Lcau => {
                use rand::Rng;
                let seed = rng.gen::<u64>();
                UpStage::Lcau(LcauParams::seeded(channels, 2, k, seed)?)
            }
        })
    }

    pub fn forward(&self, input: &Grid<T>) -> Result<(Grid<T>, StageCtx<T>)> {
        match self {
            UpStage::Nearest => Ok((
                ops::nearest_upsample(input, 2)?,
                StageCtx::Plain {
                    input_shape: input.shape(),
                },
            )),
            UpStage::Bilinear => Ok((
                ops::bilinear_upsample(input, 2)?,
                StageCtx::Plain {
                    input_shape: input.shape(),
                },
            )),
            UpStage::Deconv { weights, bias } => Ok((
                ops::deconv_upsample(input, weights, bias, 2)?,
                StageCtx::WithInput { input: input.clone() },
            )),
            UpStage::SubPixel { weights, bias } => {
                let expanded = ops::conv3x3_forward(input, weights, bias)?;
                Ok((
                    ops::pixel_shuffle(&expanded, 2)?,
                    StageCtx::WithInput { input: input.clone() },
                ))
            }
            UpStage::Lcau(params) => {
                let (out, ctx) = lcau::lcau_forward(input, params)?;
                Ok((out, StageCtx::Lcau(ctx)))
            }
        }
    }

    /// Gradient with respect to the stage input (parameter gradients are not
    /// tracked at the decoder level).
    pub fn backward(&self, grad_out: &Grid<T>, ctx: &StageCtx<T>) -> Result<Grid<T>> {
        match (self, ctx) {
            (UpStage::Nearest, StageCtx::Plain { input_shape }) => {
                ops::nearest_upsample_backward(grad_out, *input_shape, 2)
            }
            (UpStage::Bilinear, StageCtx::Plain { input_shape }) => {
                ops::bilinear_upsample_backward(grad_out, *input_shape, 2)
            }
            (UpStage::Deconv { weights, .. }, StageCtx::WithInput { input }) => {
                let (gi, _, _) = ops::deconv_upsample_backward(grad_out, input, weights, 2)?;
                Ok(gi)
            }
            (UpStage::SubPixel { weights, .. }, StageCtx::WithInput { input }) => {
                let g = ops::pixel_shuffle_backward(grad_out, 2)?;
                let (gi, _, _) = ops::conv3x3_backward(&g, input, weights)?;
                Ok(gi)
            }
            (UpStage::Lcau(params), StageCtx::Lcau(lctx)) => {
                Ok(lcau::lcau_backward(grad_out, params, lctx)?.grad_input)
            }
            _ => Err(Error::shape("stage/context mismatch".to_string())),
        }
    }
}

/// All decoder parameters: per-branch x2 stage chains, the aggregation
/// projection, the final x4 chain and the 1-channel head.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub config: DecoderConfig,
    pub up_c3: Vec<UpStage<T>>,
    pub up_c4: Vec<UpStage<T>>,
    pub up_c5: Vec<UpStage<T>>,
    pub final_up: Vec<UpStage<T>>,
    pub proj_weights: Grid<T>,
    pub proj_bias: Vec<T>,
    pub head_weights: Grid<T>,
    pub head_bias: Vec<T>,
}

impl<T: Real> DecoderParams<T> {
    pub fn seeded(config: DecoderConfig, seed: u64) -> Result<Self> {
        if config.channels == 0 {
            return Err(Error::param("decoder: channels must be positive".to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let fpn_kind = config.upsampler;
        let final_kind = match (config.upsampler, config.lcau_placement) {
            (UpsamplerKind::Lcau, LcauPlacement::FpnOnly) => UpsamplerKind::Nearest,
            (kind, _) => kind,
        };
        let chain = |kind: UpsamplerKind, len: usize, rng: &mut ChaCha8Rng| -> Result<Vec<UpStage<T>>> {
            (0..len).map(|_| UpStage::build(kind, c, config.lcau_k, rng)).collect()
        };
        Ok(DecoderParams {
            up_c3: chain(fpn_kind, 1, &mut rng)?,
            up_c4: chain(fpn_kind, 2, &mut rng)?,
            up_c5: chain(fpn_kind, 3, &mut rng)?,
            final_up: chain(final_kind, 2, &mut rng)?,
            proj_weights: uniform_grid(&mut rng, [c, 4 * c, 3, 3], 4 * c * 9),
            proj_bias: uniform_vec(&mut rng, c, 4 * c * 9),
            head_weights: uniform_grid(&mut rng, [1, c, 3, 3], c * 9),
            head_bias: uniform_vec(&mut rng, 1, c * 9),
            config,
        })
    }
}

fn concat_channels<T: Real>(parts: &[&Grid<T>]) -> Result<Grid<T>> {
    let [n, _, h, w] = parts[0].shape();
    let c_total: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Grid::zeros(n, c_total, h, w);
    let mut offset = 0;
    for part in parts {
        part.require_shape([n, part.c(), h, w], "concat")?;
        for ni in 0..n {
            for ci in 0..part.c() {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(ni, offset + ci, y, x) = part.at(ni, ci, y, x);
                    }
                }
            }
        }
        offset += part.c();
    }
    Ok(out)
}

fn slice_channels<T: Real>(grid: &Grid<T>, from: usize, count: usize) -> Grid<T> {
    let [n, _, h, w] = grid.shape();
    let mut out = Grid::zeros(n, count, h, w);
    for ni in 0..n {
        for ci in 0..count {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = grid.at(ni, from + ci, y, x);
                }
            }
        }
    }
    out
}

fn run_chain<T: Real>(stages: &[UpStage<T>], input: &Grid<T>) -> Result<(Grid<T>, Vec<StageCtx<T>>)> {
    let mut cur = input.clone();
    let mut ctxs = Vec::with_capacity(stages.len());
    for stage in stages {
        let (next, ctx) = stage.forward(&cur)?;
        cur = next;
        ctxs.push(ctx);
    }
    Ok((cur, ctxs))
}

fn chain_backward<T: Real>(stages: &[UpStage<T>], ctxs: &[StageCtx<T>], grad: &Grid<T>) -> Result<Grid<T>> {
    let mut g = grad.clone();
    for (stage, ctx) in stages.iter().zip(ctxs.iter()).rev() {
        g = stage.backward(&g, ctx)?;
    }
    Ok(g)
}

/// Saved activations for [`decode_backward`].
#[derive(Debug, Clone)]
pub struct DecodeContext<T> {
    branch_ctxs: [Vec<StageCtx<T>>; 3],
    concat: Grid<T>,
    proj_out: Grid<T>,
    final_ctxs: Vec<StageCtx<T>>,
    head_input: Grid<T>,
    output: Grid<T>,
}

/// Gradients of a scalar loss with respect to the pyramid inputs.
#[derive(Debug, Clone)]
pub struct PyramidGrads<T> {
    pub c2: Grid<T>,
    pub c3: Grid<T>,
    pub c4: Grid<T>,
    pub c5: Grid<T>,
}

pub fn decode_with_ctx<T: Real>(p: &Pyramid<T>, params: &DecoderParams<T>) -> Result<(Grid<T>, DecodeContext<T>)> {
    p.validate(params.config.channels)?;
    let (b3, ctx3) = run_chain(&params.up_c3, &p.c3)?;
    let (b4, ctx4) = run_chain(&params.up_c4, &p.c4)?;
    let (b5, ctx5) = run_chain(&params.up_c5, &p.c5)?;
    let concat = concat_channels(&[&p.c2, &b3, &b4, &b5])?;
    let proj_out = ops::conv3x3_forward(&concat, &params.proj_weights, &params.proj_bias)?;
    let (head_input, final_ctxs) = run_chain(&params.final_up, &proj_out)?;
    let logits = ops::conv3x3_forward(&head_input, &params.head_weights, &params.head_bias)?;
    let output = logits.map(|v| T::one() / (T::one() + (-v).exp()));
    Ok((
        output.clone(),
        DecodeContext {
            branch_ctxs: [ctx3, ctx4, ctx5],
            concat,
            proj_out,
            final_ctxs,
            head_input,
            output,
        },
    ))
}

/// Full-resolution probability map in `(0, 1)`; spatial extents are 4x the
/// C2 extents, i.e. the original image scale.
pub fn decode<T: Real>(p: &Pyramid<T>, params: &DecoderParams<T>) -> Result<Grid<T>> {
    decode_with_ctx(p, params).map(|(out, _)| out)
}

pub fn decode_backward<T: Real>(
    grad_out: &Grid<T>,
    params: &DecoderParams<T>,
    ctx: &DecodeContext<T>,
) -> Result<PyramidGrads<T>> {
    grad_out.require_shape(ctx.output.shape(), "decode backward: grad_out")?;
    // through the sigmoid
    let mut g_logits = grad_out.clone();
    for (g, &o) in g_logits.data_mut().iter_mut().zip(ctx.output.data()) {
        *g *= o * (T::one() - o);
    }
    let (g_head_in, _, _) = ops::conv3x3_backward(&g_logits, &ctx.head_input, &params.head_weights)?;
    let g_proj_out = chain_backward(&params.final_up, &ctx.final_ctxs, &g_head_in)?;
    g_proj_out.require_shape(ctx.proj_out.shape(), "decode backward: proj")?;
    let (g_concat, _, _) = ops::conv3x3_backward(&g_proj_out, &ctx.concat, &params.proj_weights)?;
    let c = params.config.channels;
    let g_c2 = slice_channels(&g_concat, 0, c);
    let g_b3 = slice_channels(&g_concat, c, c);
    let g_b4 = slice_channels(&g_concat, 2 * c, c);
    let g_b5 = slice_channels(&g_concat, 3 * c, c);
    Ok(PyramidGrads {
        c2: g_c2,
        c3: chain_backward(&params.up_c3, &ctx.branch_ctxs[0], &g_b3)?,
        c4: chain_backward(&params.up_c4, &ctx.branch_ctxs[1], &g_b4)?,
        c5: chain_backward(&params.up_c5, &ctx.branch_ctxs[2], &g_b5)?,
    })
}

/// Deterministic stand-in for the backbone: seeded random strided
/// convolutions produce a valid pyramid from an `(n, 3, H, W)` image.
pub fn synth_pyramid<T: Real>(image: &Grid<T>, channels: usize, seed: u64) -> Result<Pyramid<T>> {
    let [_, c, h, w] = image.shape();
    if c != 3 {
        return Err(Error::shape(format!("synth_pyramid: expected 3 channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!("synth_pyramid: extents {h}x{w} not divisible by 32")));
    }
    let level = |l: usize| -> Result<Grid<T>> {
        let stride = 1usize << l;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(l as u64));
        let scale = 1.0 / ((3 * stride * stride) as f64).sqrt();
        let weights = Grid::random(channels, 3, stride, stride, -scale, scale, &mut rng);
        ops::strided_conv(image, &weights, stride)
    };
    Ok(Pyramid {
        c2: level(2)?,
        c3: level(3)?,
        c4: level(4)?,
        c5: level(5)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Grid64;

    fn small_config(kind: UpsamplerKind) -> DecoderConfig {
        DecoderConfig {
            channels: 4,
            upsampler: kind,
            lcau_placement: LcauPlacement::All,
            lcau_k: 3,
        }
    }

    fn image(seed: u64) -> Grid64 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        Grid64::from_vec(1, 3, 32, 32, data).unwrap()
    }

    #[test]
    fn synth_pyramid_shapes_and_determinism() {
        let img = image(7);
        let p = synth_pyramid(&img, 4, 7).unwrap();
        assert_eq!(p.c2.shape(), [1, 4, 8, 8]);
        assert_eq!(p.c3.shape(), [1, 4, 4, 4]);
        assert_eq!(p.c4.shape(), [1, 4, 2, 2]);
        assert_eq!(p.c5.shape(), [1, 4, 1, 1]);
        let q = synth_pyramid(&img, 4, 7).unwrap();
        assert_eq!(p.c2, q.c2);
        assert_eq!(p.c5, q.c5);
        let r = synth_pyramid(&img, 4, 8).unwrap();
        assert_ne!(p.c2, r.c2);
    }

    #[test]
    fn synth_pyramid_rejects_indivisible() {
        let img = Grid64::zeros(1, 3, 30, 32);
        assert!(synth_pyramid(&img, 4, 0).is_err());
    }

    #[test]
    fn decode_shape_and_range() {
        for kind in UpsamplerKind::ALL {
            let params = DecoderParams::<f64>::seeded(small_config(kind), 3).unwrap();
            let p = synth_pyramid(&image(1), 4, 1).unwrap();
            let out = decode(&p, &params).unwrap();
            assert_eq!(out.shape(), [1, 1, 32, 32], "kind {kind:?}");
            assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_pyramid_gives_constant_output() {
        let params = DecoderParams::<f64>::seeded(small_config(UpsamplerKind::Nearest), 5).unwrap();
        let p = Pyramid {
            c2: Grid64::zeros(1, 4, 8, 8),
            c3: Grid64::zeros(1, 4, 4, 4),
            c4: Grid64::zeros(1, 4, 2, 2),
            c5: Grid64::zeros(1, 4, 1, 1),
        };
        let out = decode(&p, &params).unwrap();
        let first = out.at(0, 0, 12, 12);
        // interior is constant; borders differ through conv padding
        for y in 8..24 {
            for x in 8..24 {
                assert!((out.at(0, 0, y, x) - first).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn placement_changes_final_stage_only() {
        let mut cfg = small_config(UpsamplerKind::Lcau);
        cfg.lcau_placement = LcauPlacement::FpnOnly;
        let params = DecoderParams::<f64>::seeded(cfg, 3).unwrap();
        assert!(matches!(params.final_up[0], UpStage::Nearest));
        assert!(matches!(params.up_c3[0], UpStage::Lcau(_)));
        let all = DecoderParams::<f64>::seeded(small_config(UpsamplerKind::Lcau), 3).unwrap();
        assert!(matches!(all.final_up[0], UpStage::Lcau(_)));
    }

    #[test]
    fn pyramid_validation_errors() {
        let p = Pyramid {
            c2: Grid64::zeros(1, 4, 8, 8),
            c3: Grid64::zeros(1, 4, 5, 4),
            c4: Grid64::zeros(1, 4, 2, 2),
            c5: Grid64::zeros(1, 4, 1, 1),
        };
        assert!(p.validate(4).is_err());
    }
}
