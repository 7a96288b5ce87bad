//! Image-quality and matting metrics.
//!
//! PSNR is taken jointly over all channels, SSIM and NIQE on Rec.601 luma.
//! PI combines NIQE with an externally supplied Ma score. Matting errors
//! are whole-image means scaled by [`MATTING_SCALE`].

mod matting;
mod niqe;
mod report;

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

pub use matting::{
    evaluate_matting, load_manifest, parse_manifest, Condition, GridRow, ManifestEntry, MattingGrid,
};
pub use niqe::{
    fit_aggd, niqe, niqe_features, Aggd, PristineModel, NIQE_FEATURES, NIQE_PATCH,
    SHARPNESS_FRACTION,
};
pub use report::{ImageMetrics, MetricReport};

/// Multiplier applied to matting MSE and MAE before reporting.
pub const MATTING_SCALE: f64 = 1000.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(op: &'static str, a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    let dims = |i: &ImageBuffer| (i.width(), i.height(), i.channels());
    if dims(a) != dims(b) {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?} (width, height, channels)", dims(a), dims(b)),
        ));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, peak: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub(crate) fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable correlation keeping only fully covered positions.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, ow, oh)
}

/// Separable correlation with edge replication, same size as the input.
pub(crate) fn filter_replicate(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, t)| t * plane[y * w + clamp(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[clamp(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all fully covered 11x11 Gaussian windows of the luma.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {w}x{h}"
        )));
    }
    let la: Vec<f64> = a.luma().into_iter().map(f64::from).collect();
    let lb: Vec<f64> = b.luma().into_iter().map(f64::from).collect();
    let k = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let (mu_a, ..) = filter_valid(&la, w, h, &k);
    let (mu_b, ..) = filter_valid(&lb, w, h, &k);
    let (e_aa, ..) = filter_valid(&prod(&la, &la), w, h, &k);
    let (e_bb, ..) = filter_valid(&prod(&lb, &lb), w, h, &k);
    let (e_ab, ..) = filter_valid(&prod(&la, &lb), w, h, &k);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Perceptual index from a NIQE score and an external Ma score.
pub fn pi(niqe_score: f64, ma_score: f64) -> f64 {
    0.5 * ((10.0 - ma_score) + niqe_score)
}

/// Whole-image `(MSE, MAE)` between alpha mattes, each times [`MATTING_SCALE`].
pub fn matting_error(alpha_pred: &ImageBuffer, alpha_gt: &ImageBuffer) -> Result<(f64, f64)> {
    same_shape("matting_error", alpha_pred, alpha_gt)?;
    if alpha_pred.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "alpha mattes must be single-channel, got {} channels",
            alpha_pred.channels()
        )));
    }
    let n = alpha_pred.data().len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &g) in alpha_pred.data().iter().zip(alpha_gt.data()) {
        let d = p as f64 - g as f64;
        se += d * d;
        ae += d.abs();
    }
    Ok((MATTING_SCALE * se / n, MATTING_SCALE * ae / n))
}
