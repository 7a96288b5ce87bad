//! Training objectives: least-squares adversarial terms, discriminator
//! feature matching, L1 pixel loss and the perceptual loss.

mod perceptual;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

pub use perceptual::{
    AvgPoolPyramid, ConvPyramid, ExtractorFactory, ExtractorRegistry, FeatureExtractor,
    DEFAULT_EXTRACTOR, DEFAULT_PYRAMID_SEED, TAPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub beta_perceptual: f64,
    pub lambda_fm: f64,
    pub perceptual_coeffs: [f64; TAPS],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pixel: 0.5,
            beta_perceptual: 1.0,
            lambda_fm: 10.0,
            perceptual_coeffs: [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0],
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_pixel", self.lambda_pixel),
            ("beta_perceptual", self.beta_perceptual),
            ("lambda_fm", self.lambda_fm),
        ];
        let coeffs = self
            .perceptual_coeffs
            .iter()
            .map(|&c| ("perceptual coefficient", c));
        for (name, v) in named.into_iter().chain(coeffs) {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The generator-side loss components, as tape handles or plain values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts<V> {
    pub adversarial: V,
    pub feature_matching: V,
    pub pixel: V,
    pub perceptual: V,
}

impl LossParts<f64> {
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.adversarial
            + w.lambda_fm * self.feature_matching
            + w.lambda_pixel * self.pixel
            + w.beta_perceptual * self.perceptual
    }
}

impl LossParts<Var> {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossParts<f64> {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossParts {
            adversarial: v(self.adversarial),
            feature_matching: v(self.feature_matching),
            pixel: v(self.pixel),
            perceptual: v(self.perceptual),
        }
    }
}

/// `Σ wᵢ·xᵢ` over scalar nodes.
fn weighted_sum<T: Real>(tape: &mut Tape<T>, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(x, w) in terms {
        let term = if w == 1.0 { x } else { tape.scale(x, w) };
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("empty loss sum".into()))
}

fn check_scales(op: &str, a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::shape(
            "loss",
            format!("{op}: {a} real vs {b} fake discriminator scales"),
        ));
    }
    Ok(())
}

/// Mean over scales of `sq_mean(real - 1) + sq_mean(fake)`.
pub fn adversarial_loss_d<T: Real>(
    tape: &mut Tape<T>,
    real_maps: &[Var],
    fake_maps: &[Var],
) -> Result<Var> {
    check_scales("adversarial_loss_d", real_maps.len(), fake_maps.len())?;
    let w = 1.0 / real_maps.len() as f64;
    let mut terms = Vec::with_capacity(2 * real_maps.len());
    for (&r, &f) in real_maps.iter().zip(fake_maps) {
        let r1 = tape.shift(r, -1.0);
        terms.push((tape.sq_mean(r1), w));
        terms.push((tape.sq_mean(f), w));
    }
    weighted_sum(tape, &terms)
}

/// Mean over scales of `sq_mean(fake - 1)`.
pub fn adversarial_loss_g<T: Real>(tape: &mut Tape<T>, fake_maps: &[Var]) -> Result<Var> {
    check_scales("adversarial_loss_g", fake_maps.len(), fake_maps.len())?;
    let w = 1.0 / fake_maps.len() as f64;
    let terms: Vec<(Var, f64)> = fake_maps
        .iter()
        .map(|&f| {
            let f1 = tape.shift(f, -1.0);
            (tape.sq_mean(f1), w)
        })
        .collect();
    weighted_sum(tape, &terms)
}

/// Mean absolute difference of discriminator activations, averaged over
/// every (scale, layer) pair.
pub fn feature_matching_loss<T: Real>(
    tape: &mut Tape<T>,
    real_feats: &[Vec<Var>],
    fake_feats: &[Vec<Var>],
) -> Result<Var> {
    check_scales("feature_matching_loss", real_feats.len(), fake_feats.len())?;
    let mut pairs = Vec::new();
    for (s, (r, f)) in real_feats.iter().zip(fake_feats).enumerate() {
        if r.len() != f.len() || r.is_empty() {
            return Err(Error::shape(
                "loss",
                format!(
                    "feature_matching_loss: scale {s} has {} real vs {} fake layers",
                    r.len(),
                    f.len()
                ),
            ));
        }
        pairs.extend(r.iter().copied().zip(f.iter().copied()));
    }
    let w = 1.0 / pairs.len() as f64;
    let mut terms = Vec::with_capacity(pairs.len());
    for (r, f) in pairs {
        let d = tape.sub(r, f)?;
        terms.push((tape.abs_mean(d), w));
    }
    weighted_sum(tape, &terms)
}

/// `abs_mean(fake - real)`.
pub fn pixel_loss<T: Real>(tape: &mut Tape<T>, y_fake: Var, y_real: Var) -> Result<Var> {
    let d = tape.sub(y_fake, y_real)?;
    Ok(tape.abs_mean(d))
}

/// `Σᵢ cᵢ · abs_mean(Lⁱ(fake) - Lⁱ(real))` over the extractor's five taps.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    y_fake: Var,
    y_real: Var,
    extractor: &dyn FeatureExtractor<T>,
    coeffs: &[f64; TAPS],
) -> Result<Var> {
    if tape.value(y_fake).shape() != tape.value(y_real).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!(
                "images differ in shape: {:?} vs {:?}",
                tape.value(y_fake).shape(),
                tape.value(y_real).shape()
            ),
        ));
    }
    let fake = extractor.extract(tape, y_fake)?;
    let real = extractor.extract(tape, y_real)?;
    let mut terms = Vec::with_capacity(TAPS);
    for ((f, r), &c) in fake.into_iter().zip(real).zip(coeffs) {
        let d = tape.sub(f, r)?;
        terms.push((tape.abs_mean(d), c));
    }
    weighted_sum(tape, &terms)
}

/// `adversarial + λ_fm·fm + λ_pixel·pixel + β·perceptual`.
pub fn total_generator_loss<T: Real>(
    tape: &mut Tape<T>,
    parts: &LossParts<Var>,
    w: &LossWeights,
) -> Result<Var> {
    weighted_sum(
        tape,
        &[
            (parts.adversarial, 1.0),
            (parts.feature_matching, w.lambda_fm),
            (parts.pixel, w.lambda_pixel),
            (parts.perceptual, w.beta_perceptual),
        ],
    )
}
