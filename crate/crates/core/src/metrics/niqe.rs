//! NIQE: distance between the natural-scene statistics of an image and a
//! pristine multivariate Gaussian model.
//!
//! Luma in `[0, 255]` is normalized into MSCN coefficients with a 7x7
//! Gaussian (sigma 7/6). Each 96x96 patch yields 18 features per scale: an
//! AGGD fit of the coefficients plus AGGD fits of four neighbour products.
//! The second scale works on a 2x box-downsampled image with 48x48 patches.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use super::{filter_replicate, gaussian_kernel};
use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::tensor::Tensor;

pub const NIQE_PATCH: usize = 96;
pub const NIQE_FEATURES: usize = 36;
/// Pristine patches must reach this fraction of the sharpest patch.
pub const SHARPNESS_FRACTION: f64 = 0.75;
const PER_SCALE: usize = NIQE_FEATURES / 2;
const MSCN_WINDOW: usize = 7;
const MSCN_SIGMA: f64 = 7.0 / 6.0;
/// `(row, column)` offsets of the neighbour products, as circular shifts.
const SHIFTS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (-1, 1)];

/// Asymmetric generalized Gaussian parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggd {
    pub alpha: f64,
    pub sigma_left: f64,
    pub sigma_right: f64,
}

fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// `(alpha, Γ(2/α)² / (Γ(1/α)·Γ(3/α)))` for α on a 0.001 grid over [0.2, 10].
fn ratio_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + 0.001 * i as f64;
                let r =
                    (2.0 * libm::lgamma(2.0 / a) - libm::lgamma(1.0 / a) - libm::lgamma(3.0 / a))
                        .exp();
                (a, r)
            })
            .collect()
    })
}

/// Moment-matching AGGD estimate.
pub fn fit_aggd(samples: &[f64]) -> Result<Aggd> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "AGGD fit needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().all(|&v| v == samples[0]) {
        return Err(Error::InvalidArgument(
            "AGGD fit on all-equal samples".into(),
        ));
    }
    let side = |keep: fn(f64) -> bool| {
        let (mut s, mut n) = (0.0, 0usize);
        for &v in samples.iter().filter(|&&v| keep(v)) {
            s += v * v;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            (s / n as f64).sqrt()
        }
    };
    let sigma_left = side(|v| v < 0.0);
    let sigma_right = side(|v| v > 0.0);
    let n = samples.len() as f64;
    let mean_abs = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = samples.iter().map(|v| v * v).sum::<f64>() / n;
    let r_hat = mean_abs * mean_abs / mean_sq;
    let r_norm = if sigma_right == 0.0 {
        // gamma_hat -> infinity
        r_hat
    } else {
        let g = sigma_left / sigma_right;
        r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2)
    };
    let alpha = ratio_table()
        .iter()
        .min_by(|a, b| (a.1 - r_norm).powi(2).total_cmp(&(b.1 - r_norm).powi(2)))
        .map(|&(a, _)| a)
        .unwrap_or(2.0);
    Ok(Aggd {
        alpha,
        sigma_left,
        sigma_right,
    })
}

fn patch_features(mscn: &[f64], pw: usize, ph: usize) -> Result<[f64; PER_SCALE]> {
    let mut out = [0.0; PER_SCALE];
    let base = fit_aggd(mscn)?;
    out[0] = base.alpha;
    out[1] = (base.sigma_left + base.sigma_right) / 2.0;
    let mut prod = vec![0.0; mscn.len()];
    for (s, &(dy, dx)) in SHIFTS.iter().enumerate() {
        for y in 0..ph {
            let sy = (y as isize - dy).rem_euclid(ph as isize) as usize;
            for x in 0..pw {
                let sx = (x as isize - dx).rem_euclid(pw as isize) as usize;
                prod[y * pw + x] = mscn[y * pw + x] * mscn[sy * pw + sx];
            }
        }
        let a = fit_aggd(&prod)?;
        let mean = (a.sigma_right - a.sigma_left) * gamma(2.0 / a.alpha) / gamma(1.0 / a.alpha);
        out[2 + 4 * s..6 + 4 * s].copy_from_slice(&[a.alpha, mean, a.sigma_left, a.sigma_right]);
    }
    Ok(out)
}

/// MSCN coefficients and the local standard deviation map.
fn mscn(plane: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let k = gaussian_kernel(MSCN_WINDOW, MSCN_SIGMA);
    let mu = filter_replicate(plane, w, h, &k);
    let sq: Vec<f64> = plane.iter().map(|v| v * v).collect();
    let e2 = filter_replicate(&sq, w, h, &k);
    let sigma: Vec<f64> = mu
        .iter()
        .zip(&e2)
        .map(|(m, e)| (e - m * m).abs().sqrt())
        .collect();
    let coeffs = plane
        .iter()
        .zip(&mu)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + 1.0))
        .collect();
    (coeffs, sigma)
}

fn extract(values: &[f64], w: usize, px: usize, py: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    for y in py * size..(py + 1) * size {
        out.extend_from_slice(&values[y * w + px * size..y * w + (px + 1) * size]);
    }
    out
}

/// Per-patch 36-dimensional feature vectors in raster order. With
/// `sharpness` set, only patches whose mean local deviation reaches that
/// fraction of the sharpest patch are kept. Patches whose statistics are
/// degenerate (flat regions) are skipped.
pub fn niqe_features(
    img: &ImageBuffer,
    patch: usize,
    sharpness: Option<f64>,
) -> Result<Vec<[f64; NIQE_FEATURES]>> {
    if patch < 4 || !patch.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "NIQE patch size must be even and >= 4, got {patch}"
        )));
    }
    let (nx, ny) = (img.width() / patch, img.height() / patch);
    if nx * ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "NIQE needs at least one {patch}x{patch} patch, image is {}x{}",
            img.width(),
            img.height()
        )));
    }
    let (w, h) = (nx * patch, ny * patch);
    let luma = img.luma();
    let mut plane = Vec::with_capacity(w * h);
    for y in 0..h {
        plane.extend(
            luma[y * img.width()..y * img.width() + w]
                .iter()
                .map(|&v| 255.0 * v as f64),
        );
    }
    let (c1, sigma1) = mscn(&plane, w, h);
    let (w2, h2) = (w / 2, h / 2);
    let half: Vec<f64> = (0..w2 * h2)
        .map(|i| {
            let (x, y) = (2 * (i % w2), 2 * (i / w2));
            (plane[y * w + x]
                + plane[y * w + x + 1]
                + plane[(y + 1) * w + x]
                + plane[(y + 1) * w + x + 1])
                / 4.0
        })
        .collect();
    let (c2, _) = mscn(&half, w2, h2);

    let mut feats = Vec::new();
    let mut sharp = Vec::new();
    for py in 0..ny {
        for px in 0..nx {
            let f1 = patch_features(&extract(&c1, w, px, py, patch), patch, patch);
            let f2 = patch_features(&extract(&c2, w2, px, py, patch / 2), patch / 2, patch / 2);
            let s = extract(&sigma1, w, px, py, patch).iter().sum::<f64>() / (patch * patch) as f64;
            if let (Ok(f1), Ok(f2)) = (f1, f2) {
                let mut f = [0.0; NIQE_FEATURES];
                f[..PER_SCALE].copy_from_slice(&f1);
                f[PER_SCALE..].copy_from_slice(&f2);
                if f.iter().all(|v| v.is_finite()) {
                    feats.push(f);
                    sharp.push(s);
                }
            }
        }
    }
    if let Some(frac) = sharpness {
        let max = sharp.iter().cloned().fold(0.0, f64::max);
        feats = feats
            .into_iter()
            .zip(&sharp)
            .filter(|(_, &s)| s > frac * max)
            .map(|(f, _)| f)
            .collect();
    }
    Ok(feats)
}

/// Features of the horizontally mirrored patch: the two diagonal
/// neighbour products trade places at both scales.
fn mirrored(f: &[f64; NIQE_FEATURES]) -> [f64; NIQE_FEATURES] {
    let mut out = *f;
    for scale in [0, PER_SCALE] {
        let (d1, d2) = (scale + 2 + 4 * 2, scale + 2 + 4 * 3);
        out[d1..d1 + 4].copy_from_slice(&f[d2..d2 + 4]);
        out[d2..d2 + 4].copy_from_slice(&f[d1..d1 + 4]);
    }
    out
}

fn mean_cov(feats: &[[f64; NIQE_FEATURES]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len() as f64;
    let mut mean = DVector::zeros(NIQE_FEATURES);
    for f in feats {
        mean += DVector::from_row_slice(f);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(NIQE_FEATURES, NIQE_FEATURES);
    for f in feats {
        let d = DVector::from_row_slice(f) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1.0).max(1.0);
    (mean, cov)
}

/// Multivariate Gaussian fitted to pristine patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct PristineModel {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub patch_size: usize,
    pub sharpness_fraction: f64,
}

impl PristineModel {
    /// Fits the model to the sharp patches of `images`.
    pub fn fit(images: &[ImageBuffer]) -> Result<Self> {
        Self::fit_with(images, NIQE_PATCH, SHARPNESS_FRACTION)
    }

    /// Every selected patch also contributes its mirror image's features,
    /// so scores do not change under a horizontal flip.
    pub fn fit_with(
        images: &[ImageBuffer],
        patch_size: usize,
        sharpness_fraction: f64,
    ) -> Result<Self> {
        let mut feats = Vec::new();
        for img in images {
            for f in niqe_features(img, patch_size, Some(sharpness_fraction))? {
                feats.push(f);
                feats.push(mirrored(&f));
            }
        }
        if feats.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "pristine model needs at least 2 usable patches, found {}",
                feats.len()
            )));
        }
        let (mean, cov) = mean_cov(&feats);
        Ok(Self {
            mean,
            cov,
            patch_size,
            sharpness_fraction,
        })
    }

    /// Container layout: `niqe.mean` (36), `niqe.cov` (36 x 36) and
    /// `niqe.meta` (patch size, sharpness fraction).
    pub fn to_weights(&self) -> ModelWeights<f32> {
        let mut w = ModelWeights::new();
        let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        w.set(
            "niqe.mean",
            Tensor::from_vec(&[NIQE_FEATURES], f(self.mean.as_slice())),
        );
        // column-major storage of a symmetric matrix equals row-major
        w.set(
            "niqe.cov",
            Tensor::from_vec(&[NIQE_FEATURES, NIQE_FEATURES], f(self.cov.as_slice())),
        );
        w.set(
            "niqe.meta",
            Tensor::from_vec(
                &[2],
                vec![self.patch_size as f32, self.sharpness_fraction as f32],
            ),
        );
        w
    }

    pub fn from_weights(w: &ModelWeights<f32>) -> Result<Self> {
        let get = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let t = w.require(name)?;
            if t.shape() != shape {
                return Err(Error::WeightsMismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        let mean = DVector::from_vec(get("niqe.mean", &[NIQE_FEATURES])?);
        let cov = DMatrix::from_vec(
            NIQE_FEATURES,
            NIQE_FEATURES,
            get("niqe.cov", &[NIQE_FEATURES, NIQE_FEATURES])?,
        );
        let meta = get("niqe.meta", &[2])?;
        Ok(Self {
            mean,
            cov,
            patch_size: meta[0] as usize,
            sharpness_fraction: meta[1],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weights().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights(&ModelWeights::load(path)?)
    }
}

/// NIQE score of `img` against `model`; lower is more natural.
pub fn niqe(img: &ImageBuffer, model: &PristineModel) -> Result<f64> {
    let feats = niqe_features(img, model.patch_size, None)?;
    if feats.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "NIQE needs at least 2 textured {p}x{p} patches, image {}x{} has {}",
            img.width(),
            img.height(),
            feats.len(),
            p = model.patch_size
        )));
    }
    let (mu, cov) = mean_cov(&feats);
    let pooled = (&model.cov + cov) / 2.0;
    let svd = pooled.svd(true, true);
    let max_sv = svd.singular_values.max();
    let eps = max_sv * NIQE_FEATURES as f64 * f64::EPSILON;
    let inv = svd
        .pseudo_inverse(eps)
        .map_err(|e| Error::InvalidArgument(format!("pseudo-inverse failed: {e}")))?;
    let d = &model.mean - mu;
    let q = (d.transpose() * inv * &d)[(0, 0)];
    Ok(q.max(0.0).sqrt())
}
