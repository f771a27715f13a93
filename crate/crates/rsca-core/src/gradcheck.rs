//! Central finite-difference verification of every backward pass. The
//! differencing path only ever calls forward code, so it stays independent
//! of the hand-derived gradients it checks.

use crate::decoder::{self, DecoderConfig, DecoderParams, LcauPlacement};
use crate::error::Result;
use crate::grid::Grid;
use crate::lcau::{self, LcauParams, UpsamplerKind};
use crate::ops;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Differencing step on 64-bit reals.
pub const FD_STEP: f64 = 1e-3;
/// Relative-error tolerance for every check.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome of one operator's suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckReport {
    fn new(name: &str, trials: usize, max_rel_err: f64) -> Self {
        CheckReport {
            name: name.to_string(),
            trials,
            // a vacuous run (zero trials) passes but is flagged by the caller
            passed: trials == 0 || max_rel_err <= TOLERANCE,
            max_rel_err,
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central-difference gradient of a scalar functional with respect to every
/// element of `x`.
fn fd_grad(mut eval: impl FnMut(&Grid<f64>) -> f64, x: &Grid<f64>) -> Grid<f64> {
    let mut grad = x.clone();
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += FD_STEP;
        let mut minus = x.clone();
        minus.data_mut()[i] -= FD_STEP;
        grad.data_mut()[i] = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
    }
    grad
}

fn fd_grad_vec(mut eval: impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut work = x.to_vec();
    for i in 0..x.len() {
        work[i] = x[i] + FD_STEP;
        let up = eval(&work);
        work[i] = x[i] - FD_STEP;
        let down = eval(&work);
        work[i] = x[i];
        grad[i] = (up - down) / (2.0 * FD_STEP);
    }
    grad
}

fn dot(a: &Grid<f64>, b: &Grid<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

fn small_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..=2),
        rng.gen_range(1..=3),
        rng.gen_range(2..=5),
        rng.gen_range(2..=5),
    )
}

pub fn check_conv3x3(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c_in, h, w) = small_shape(&mut rng);
        let c_out = rng.gen_range(1..=3);
        let input = Grid::random(n, c_in, h, w, -1.0, 1.0, &mut rng);
        let weights = Grid::random(c_out, c_in, 3, 3, -1.0, 1.0, &mut rng);
        let bias: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cot = Grid::random(n, c_out, h, w, -1.0, 1.0, &mut rng);

        let (gi, gw, gb) = ops::conv3x3_backward(&cot, &input, &weights)?;
        let fd_i = fd_grad(|x| dot(&ops::conv3x3_forward(x, &weights, &bias).unwrap(), &cot), &input);
        let fd_w = fd_grad(|w_| dot(&ops::conv3x3_forward(&input, w_, &bias).unwrap(), &cot), &weights);
        let fd_b = fd_grad_vec(|b_| dot(&ops::conv3x3_forward(&input, &weights, b_).unwrap(), &cot), &bias);
        worst = worst
            .max(max_rel(gi.data(), fd_i.data()))
            .max(max_rel(gw.data(), fd_w.data()))
            .max(max_rel(&gb, &fd_b));
    }
    Ok(CheckReport::new("conv3x3", trials, worst))
}

fn check_plain_upsample(
    name: &str,
    seed: u64,
    trials: usize,
    forward: impl Fn(&Grid<f64>, usize) -> Result<Grid<f64>>,
    backward: impl Fn(&Grid<f64>, [usize; 4], usize) -> Result<Grid<f64>>,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c, h, w) = small_shape(&mut rng);
        let r = rng.gen_range(1..=3);
        let input = Grid::random(n, c, h, w, -1.0, 1.0, &mut rng);
        let cot = Grid::random(n, c, h * r, w * r, -1.0, 1.0, &mut rng);
        let gi = backward(&cot, input.shape(), r)?;
        let fd_i = fd_grad(|x| dot(&forward(x, r).unwrap(), &cot), &input);
        worst = worst.max(max_rel(gi.data(), fd_i.data()));
    }
    Ok(CheckReport::new(name, trials, worst))
}

pub fn check_nearest(seed: u64, trials: usize) -> Result<CheckReport> {
    check_plain_upsample("nearest_upsample", seed, trials, ops::nearest_upsample, ops::nearest_upsample_backward)
}

pub fn check_bilinear(seed: u64, trials: usize) -> Result<CheckReport> {
    check_plain_upsample(
        "bilinear_upsample",
        seed,
        trials,
        ops::bilinear_upsample,
        ops::bilinear_upsample_backward,
    )
}

pub fn check_softmax(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c, h, w) = small_shape(&mut rng);
        let input = Grid::random(n, c, h, w, -2.0, 2.0, &mut rng);
        let cot = Grid::random(n, c, h, w, -1.0, 1.0, &mut rng);
        let out = ops::channel_softmax(&input)?;
        let gi = ops::channel_softmax_backward(&cot, &out)?;
        let fd_i = fd_grad(|x| dot(&ops::channel_softmax(x).unwrap(), &cot), &input);
        worst = worst.max(max_rel(gi.data(), fd_i.data()));
    }
    Ok(CheckReport::new("channel_softmax", trials, worst))
}

pub fn check_deconv(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (n, c_in, h, w) = small_shape(&mut rng);
        let c_out = rng.gen_range(1..=2);
        let r = rng.gen_range(1..=2);
        let input = Grid::random(n, c_in, h, w, -1.0, 1.0, &mut rng);
        let weights = Grid::random(c_in, c_out, 2 * r, 2 * r, -1.0, 1.0, &mut rng);
        let bias: Vec<f64> = (0..c_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cot = Grid::random(n, c_out, h * r, w * r, -1.0, 1.0, &mut rng);
        let (gi, gw, gb) = ops::deconv_upsample_backward(&cot, &input, &weights, r)?;
        let fd_i = fd_grad(|x| dot(&ops::deconv_upsample(x, &weights, &bias, r).unwrap(), &cot), &input);
        let fd_w = fd_grad(|w_| dot(&ops::deconv_upsample(&input, w_, &bias, r).unwrap(), &cot), &weights);
        let fd_b = fd_grad_vec(|b_| dot(&ops::deconv_upsample(&input, &weights, b_, r).unwrap(), &cot), &bias);
        worst = worst
            .max(max_rel(gi.data(), fd_i.data()))
            .max(max_rel(gw.data(), fd_w.data()))
            .max(max_rel(&gb, &fd_b));
    }
    Ok(CheckReport::new("deconv_upsample", trials, worst))
}

pub fn check_pixel_shuffle(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let r = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=2) * r * r;
        let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=4), rng.gen_range(2..=4));
        let input = Grid::random(n, c, h, w, -1.0, 1.0, &mut rng);
        let cot = Grid::random(n, c / (r * r), h * r, w * r, -1.0, 1.0, &mut rng);
        let gi = ops::pixel_shuffle_backward(&cot, r)?;
        let fd_i = fd_grad(|x| dot(&ops::pixel_shuffle(x, r).unwrap(), &cot), &input);
        worst = worst.max(max_rel(gi.data(), fd_i.data()));
    }
    Ok(CheckReport::new("pixel_shuffle", trials, worst))
}

/// Reassembly-only path: weights held constant, gradient w.r.t. the input.
pub fn check_reassembly_frozen(seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, k) = (2usize, 3usize);
        let (n, c, h, w) = (1, rng.gen_range(1..=2), 3, 3);
        let input = Grid::random(n, c, h, w, -1.0, 1.0, &mut rng);
        let params = LcauParams::<f64>::seeded(c, r, k, rng.gen())?;
        let weights = lcau::lcau_weights(&input, &params)?;
        let cot = Grid::random(n, c, h * r, w * r, -1.0, 1.0, &mut rng);
        let (gi, _) = lcau::local_reassembly_backward(&cot, &input, &weights, r, k)?;
        let fd_i = fd_grad(|x| dot(&lcau::local_reassembly(x, &weights, r, k).unwrap(), &cot), &input);
        worst = worst.max(max_rel(gi.data(), fd_i.data()));
    }
    Ok(CheckReport::new("local_reassembly (frozen weights)", trials, worst))
}

/// Full LCAU path: input, generation weights and bias, through both
/// branches. `bug_scale != 1` corrupts the analytic gradient to prove the
/// harness can fail.
pub fn check_lcau_with_scale(seed: u64, trials: usize, bug_scale: f64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (r, k) = (2usize, 3usize);
        let c = rng.gen_range(1..=2);
        let input = Grid::random(1, c, 3, 3, -1.0, 1.0, &mut rng);
        let params = LcauParams::<f64>::seeded(c, r, k, rng.gen())?;
        let (out, ctx) = lcau::lcau_forward(&input, &params)?;
        let cot = Grid::random(1, c, out.h(), out.w(), -1.0, 1.0, &mut rng);
        let grads = lcau::lcau_backward(&cot, &params, &ctx)?;

        let fd_i = fd_grad(|x| dot(&lcau::lcau_forward(x, &params).unwrap().0, &cot), &input);
        let fd_w = fd_grad(
            |w_| {
                let mut p = params.clone();
                p.gen_weights = w_.clone();
                dot(&lcau::lcau_forward(&input, &p).unwrap().0, &cot)
            },
            &params.gen_weights,
        );
        let fd_b = fd_grad_vec(
            |b_| {
                let mut p = params.clone();
                p.gen_bias = b_.to_vec();
                dot(&lcau::lcau_forward(&input, &p).unwrap().0, &cot)
            },
            &params.gen_bias,
        );
        let scaled: Vec<f64> = grads.grad_input.data().iter().map(|v| v * bug_scale).collect();
        let scaled_w: Vec<f64> = grads.grad_gen_weights.data().iter().map(|v| v * bug_scale).collect();
        let scaled_b: Vec<f64> = grads.grad_gen_bias.iter().map(|v| v * bug_scale).collect();
        worst = worst
            .max(max_rel(&scaled, fd_i.data()))
            .max(max_rel(&scaled_w, fd_w.data()))
            .max(max_rel(&scaled_b, &fd_b));
    }
    Ok(CheckReport::new("lcau", trials, worst))
}

pub fn check_lcau(seed: u64, trials: usize) -> Result<CheckReport> {
    check_lcau_with_scale(seed, trials, 1.0)
}

/// End-to-end decode differentiability for one upsampler kind: backprop to
/// sampled pyramid values against finite differences.
pub fn check_decoder(kind: UpsamplerKind, seed: u64, trials: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = DecoderConfig {
        channels: 2,
        upsampler: kind,
        lcau_placement: LcauPlacement::All,
        lcau_k: 3,
    };
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let params = DecoderParams::<f64>::seeded(config, rng.gen())?;
        let image = Grid::random(1, 3, 32, 32, 0.0, 1.0, &mut rng);
        let pyramid = decoder::synth_pyramid(&image, config.channels, rng.gen())?;
        let (out, ctx) = decoder::decode_with_ctx(&pyramid, &params)?;
        let cot = Grid::random(1, 1, out.h(), out.w(), -1.0, 1.0, &mut rng);
        let grads = decoder::decode_backward(&cot, &params, &ctx)?;

        // probe a handful of pyramid values per level instead of the full
        // Jacobian; the chain is shared so coverage is equivalent
        let levels: [(&Grid<f64>, &Grid<f64>); 4] = [
            (&pyramid.c2, &grads.c2),
            (&pyramid.c3, &grads.c3),
            (&pyramid.c4, &grads.c4),
            (&pyramid.c5, &grads.c5),
        ];
        for (li, (value, grad)) in levels.iter().enumerate() {
            for _ in 0..2 {
                let idx = rng.gen_range(0..value.len());
                let perturbed = |delta: f64| -> f64 {
                    let mut p = pyramid.clone();
                    let target = match li {
                        0 => &mut p.c2,
                        1 => &mut p.c3,
                        2 => &mut p.c4,
                        _ => &mut p.c5,
                    };
                    target.data_mut()[idx] += delta;
                    dot(&decoder::decode(&p, &params).unwrap(), &cot)
                };
                let fd = (perturbed(FD_STEP) - perturbed(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(grad.data()[idx], fd));
            }
        }
    }
    Ok(CheckReport::new(&format!("decode[{kind:?}]"), trials, worst))
}

/// The whole suite, used by the acceptance gate and the CLI.
pub fn run_all(seed: u64, trials: usize) -> Result<Vec<CheckReport>> {
    let mut reports = vec![
        check_conv3x3(seed, trials)?,
        check_nearest(seed.wrapping_add(1), trials)?,
        check_bilinear(seed.wrapping_add(2), trials)?,
        check_softmax(seed.wrapping_add(3), trials)?,
        check_deconv(seed.wrapping_add(4), trials)?,
        check_pixel_shuffle(seed.wrapping_add(5), trials)?,
        check_reassembly_frozen(seed.wrapping_add(6), trials)?,
        check_lcau(seed.wrapping_add(7), trials)?,
    ];
    // decode is heavier; a few trials per kind keep the suite fast while the
    // probed positions still vary per trial
    let decode_trials = trials.min(3);
    for kind in UpsamplerKind::ALL {
        reports.push(check_decoder(kind, seed.wrapping_add(8), decode_trials)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_backward_matches_finite_differences() {
        let report = check_conv3x3(42, 5).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn lcau_backward_matches_finite_differences() {
        let report = check_lcau(42, 3).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn injected_bug_is_detected() {
        let report = check_lcau_with_scale(42, 2, 1.01).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn zero_trials_is_vacuous_pass() {
        let report = check_conv3x3(42, 0).unwrap();
        assert!(report.passed);
        assert_eq!(report.trials, 0);
    }
}
