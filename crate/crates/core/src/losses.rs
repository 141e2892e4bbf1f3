//! Training losses and image metrics.

use serde::{Deserialize, Serialize};

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::deformation::Model;
use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Reported instead of +∞ for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_photo: f64,
    pub lambda_cycle: f64,
    pub lambda_entropy: f64,
    pub lambda_sparsity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_photo: 0.8,
            lambda_cycle: 0.01,
            lambda_entropy: 0.2,
            lambda_sparsity: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_photo,
            self.lambda_cycle,
            self.lambda_entropy,
            self.lambda_sparsity,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.lambda_photo > 1.0 {
            return Err(Error::Config("lambda_photo must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Individual loss terms. `photo` already combines L1 and D-SSIM.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub photo: f64,
    pub cycle: f64,
    pub entropy: f64,
    pub sparsity: f64,
}

/// Weighted sum of the loss terms; a non-finite term aborts training.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, iteration: usize) -> Result<f64> {
    for (term, v) in [
        ("photometric", parts.photo),
        ("cycle", parts.cycle),
        ("entropy", parts.entropy),
        ("sparsity", parts.sparsity),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite { term, iteration });
        }
    }
    Ok(parts.photo
        + weights.lambda_cycle * parts.cycle
        + weights.lambda_entropy * parts.entropy
        + weights.lambda_sparsity * parts.sparsity)
}

/// `(mean α, mean α(1−α))`.
pub fn filter_regularizers(alphas: &[f64]) -> (f64, f64) {
    if alphas.is_empty() {
        return (0.0, 0.0);
    }
    let n = alphas.len() as f64;
    let sparsity = alphas.iter().sum::<f64>() / n;
    let entropy = alphas.iter().map(|a| a * (1.0 - a)).sum::<f64>() / n;
    (sparsity, entropy)
}

fn check_shapes(a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_IDENTICAL))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Zero-padded same-size separable blur of a single-channel plane. The
/// window is symmetric so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += t * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += t * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM and, if requested, its gradient with respect to `pred`.
fn ssim_impl(pred: &Image, gt: &Image, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let (w, h) = (pred.width, pred.height);
    let taps = gaussian_taps();
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0; w * h * 3]);
    for c in 0..3 {
        let x = channel(pred, c);
        let y = channel(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur(&x, w, h, &taps);
        let my = blur(&y, w, h, &taps);
        let exx = blur(&xx, w, h, &taps);
        let eyy = blur(&yy, w, h, &taps);
        let exy = blur(&xy, w, h, &taps);
        let mut ga = vec![0.0; w * h];
        let mut gb = vec![0.0; w * h];
        let mut gc = vec![0.0; w * h];
        for i in 0..w * h {
            let sxx = exx[i] - mx[i] * mx[i];
            let syy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let n1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let n2 = 2.0 * sxy + SSIM_C2;
            let d1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let d2 = sxx + syy + SSIM_C2;
            let s = n1 * n2 / (d1 * d2);
            total += s;
            if want_grad {
                let a = s * (2.0 * my[i] / n1 - 2.0 * mx[i] / d1);
                let b = -s / d2;
                let cc = 2.0 * s / n2;
                ga[i] = a - 2.0 * b * mx[i] - cc * my[i];
                gb[i] = b;
                gc[i] = cc;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ba = blur(&ga, w, h, &taps);
            let bb = blur(&gb, w, h, &taps);
            let bc = blur(&gc, w, h, &taps);
            for i in 0..w * h {
                g[i * 3 + c] = (ba[i] + 2.0 * x[i] * bb[i] + y[i] * bc[i]) / n;
            }
        }
    }
    (total / n, grad)
}

pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(ssim_impl(pred, gt, false).0)
}

/// SSIM with its gradient with respect to `pred` (interleaved RGB).
pub fn ssim_with_grad(pred: &Image, gt: &Image) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let (v, g) = ssim_impl(pred, gt, true);
    Ok((v, g.unwrap_or_default()))
}

/// `λ·L1 + (1−λ)·(1 − SSIM)/2`.
pub fn photometric_loss(pred: &Image, gt: &Image, lambda_photo: f64) -> Result<f64> {
    check_shapes(pred, gt)?;
    let l1 = l1(pred, gt);
    if lambda_photo == 1.0 {
        return Ok(l1);
    }
    let s = ssim_impl(pred, gt, false).0;
    Ok(lambda_photo * l1 + (1.0 - lambda_photo) * (1.0 - s) / 2.0)
}

/// Photometric loss and its gradient with respect to `pred`.
pub fn photometric_loss_with_grad(pred: &Image, gt: &Image, lambda_photo: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(pred, gt)?;
    let n = pred.data.len().max(1) as f64;
    let mut grad: Vec<f64> = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| lambda_photo * sign(a - b) / n)
        .collect();
    let l1 = l1(pred, gt);
    if lambda_photo == 1.0 {
        return Ok((l1, grad));
    }
    let (s, gs) = ssim_with_grad(pred, gt)?;
    let k = -(1.0 - lambda_photo) / 2.0;
    for (g, d) in grad.iter_mut().zip(&gs) {
        *g += k * d;
    }
    Ok((lambda_photo * l1 + (1.0 - lambda_photo) * (1.0 - s) / 2.0, grad))
}

fn l1(pred: &Image, gt: &Image) -> f64 {
    let n = pred.data.len().max(1) as f64;
    pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Flow round-trip error: following the backward flow to `t − dt` and
/// then that point's forward flow must return to the anchor, and likewise
/// in the other direction. `weights` is an n×1 column (one row per row of
/// `x`) that selects and scales anchors; the result is their weighted mean
/// and is differentiable in the weights.
pub fn cycle_loss_var(
    model: &Model,
    tape: &mut Tape,
    x: Var,
    flow: Var,
    weights: Var,
    t: f64,
    dt: f64,
) -> Result<Var> {
    let n = tape.shape(x).0;
    if tape.shape(weights) != (n, 1) {
        return Err(Error::invalid("one cycle weight per anchor required"));
    }
    let total = tape.sum(weights);
    if !(tape.scalar(total) > 0.0) {
        return Ok(tape.constant_scalar(0.0));
    }
    let back = tape.slice_cols(flow, 0, 3);
    let fwd = tape.slice_cols(flow, 3, 3);
    let xb = tape.add(x, back);
    let xf = tape.add(x, fwd);
    let at_prev = model.flow(tape, xb, (t - dt).clamp(0.0, 1.0))?;
    let at_next = model.flow(tape, xf, (t + dt).clamp(0.0, 1.0))?;
    let ret_fwd = tape.slice_cols(at_prev, 3, 3);
    let ret_back = tape.slice_cols(at_next, 0, 3);
    let e1 = tape.add(back, ret_fwd);
    let e2 = tape.add(fwd, ret_back);
    let e1 = tape.row_norm_sq(e1);
    let e2 = tape.row_norm_sq(e2);
    let per = tape.add(e1, e2);
    let weighted = tape.mul(per, weights);
    let weighted = tape.sum(weighted);
    let log_total = tape.log(total);
    let neg = tape.scale(log_total, -1.0);
    let inv = tape.exp(neg);
    Ok(tape.mul_scalar(weighted, inv))
}

/// Unweighted cycle loss over the given anchor positions.
pub fn cycle_loss(model: &Model, anchors: &[[f64; 3]], t: f64, dt: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Array2::from_shape_fn((anchors.len(), 3), |(r, c)| anchors[r][c]));
    let flow = model.flow(&mut tape, x, t)?;
    let ones = tape.constant(Array2::ones((anchors.len(), 1)));
    let v = cycle_loss_var(model, &mut tape, x, flow, ones, t, dt)?;
    Ok(tape.scalar(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let mut img = Image::new(w, h);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let a = random_image(&mut rng, 13, 9);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(psnr(&a, &a).unwrap(), PSNR_IDENTICAL);
            assert_eq!(photometric_loss(&a, &a, 0.8).unwrap(), 0.0);
        }
    }

    #[test]
    fn pure_l1_offset() {
        let gt = Image::filled(8, 8, [0.5; 3]);
        let pred = Image::filled(8, 8, [0.6; 3]);
        assert!((photometric_loss(&pred, &gt, 1.0).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn psnr_closed_form() {
        let a = Image::filled(5, 4, [0.0; 3]);
        let b = Image::filled(5, 4, [0.1; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 12);
        let b = random_image(&mut rng, 16, 12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Image::new(4, 4);
        let b = Image::new(4, 5);
        assert!(photometric_loss(&a, &b, 0.8).is_err());
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn photometric_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_image(&mut rng, 14, 10);
        let pred = random_image(&mut rng, 14, 10);
        let (_, g) = photometric_loss_with_grad(&pred, &gt, 0.8).unwrap();
        let h = 1e-6;
        for _ in 0..60 {
            let i = rng.random_range(0..pred.data.len());
            let mut p = pred.clone();
            p.data[i] += h;
            let mut m = pred.clone();
            m.data[i] -= h;
            let num = (photometric_loss(&p, &gt, 0.8).unwrap() - photometric_loss(&m, &gt, 0.8).unwrap()) / (2.0 * h);
            assert!((num - g[i]).abs() / (num.abs() + 1e-8) < 1e-4, "{i}: {num} vs {}", g[i]);
        }
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(filter_regularizers(&[0.0; 6]), (0.0, 0.0));
        assert_eq!(filter_regularizers(&[0.5; 6]), (0.5, 0.25));
        assert_eq!(filter_regularizers(&[0.0, 1.0, 0.0, 1.0]), (0.5, 0.0));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossParts::default(), &w, 0).unwrap(), 0.0);
        let one = LossParts {
            photo: 1.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&one, &w, 0).unwrap(), 1.0);
        let p = LossParts {
            photo: 0.1,
            cycle: 2.0,
            entropy: 0.25,
            sparsity: 0.5,
        };
        assert!((total_loss(&p, &w, 0).unwrap() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let p = LossParts {
            entropy: f64::NAN,
            ..Default::default()
        };
        match total_loss(&p, &LossWeights::default(), 7) {
            Err(Error::NonFinite { term, iteration }) => {
                assert_eq!(term, "entropy");
                assert_eq!(iteration, 7);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            lambda_photo: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn entropy_bounded(alphas in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let (s, e) = filter_regularizers(&alphas);
            prop_assert!(e <= 0.25 + 1e-15);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn entropy_zero_iff_binary(bits in prop::collection::vec(any::<bool>(), 1..20), k in 0usize..20, a in 0.01f64..0.99) {
            let mut alphas: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            prop_assert_eq!(filter_regularizers(&alphas).1, 0.0);
            let k = k % alphas.len();
            alphas[k] = a;
            prop_assert!(filter_regularizers(&alphas).1 > 0.0);
        }

        #[test]
        fn total_is_linear(p in 0.0f64..5.0, c in 0.0f64..5.0, e in 0.0f64..0.25, s in 0.0f64..1.0) {
            let w = LossWeights::default();
            let parts = LossParts { photo: p, cycle: c, entropy: e, sparsity: s };
            let unit = |i: usize| {
                let mut v = [0.0; 4];
                v[i] = 1.0;
                total_loss(&LossParts { photo: v[0], cycle: v[1], entropy: v[2], sparsity: v[3] }, &w, 0).unwrap()
            };
            let want = p * unit(0) + c * unit(1) + e * unit(2) + s * unit(3);
            prop_assert!((total_loss(&parts, &w, 0).unwrap() - want).abs() < 1e-12);
        }
    }
}
