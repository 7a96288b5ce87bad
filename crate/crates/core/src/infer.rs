//! Running a trained generator on whole images.

use rayon::prelude::*;

use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, tensor_to_image, ImageBuffer};
use crate::net::{
    from_network_range, generator_forward, to_network_range, GeneratorConfig, NamedVars,
    SPATIAL_MULTIPLE,
};
use crate::tensor::Tape;

/// Generator weights ready for inference. Shared read-only, so images may
/// be processed in parallel.
#[derive(Debug, Clone)]
pub struct Corrector {
    config: GeneratorConfig,
    weights: ModelWeights<f32>,
}

impl Corrector {
    /// Takes the `g.` tensors of `weights`; anything else (discriminator,
    /// optimizer state) is ignored.
    pub fn new(weights: &ModelWeights<f32>) -> Result<Self> {
        let weights = weights.subset("g.");
        if weights.is_empty() {
            return Err(Error::WeightsMismatch(
                "checkpoint holds no generator tensors".into(),
            ));
        }
        let config = GeneratorConfig::from_weights(&weights)?;
        Ok(Self { config, weights })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::new(&ModelWeights::load(path)?)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Corrected RGB image with the input's dimensions. Gray input is
    /// replicated to RGB; sides are reflect-padded to a multiple of 32 for
    /// the network and cropped back afterwards.
    pub fn correct(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        let rgb = img.to_rgb();
        let padded = rgb.pad_to_multiple(SPATIAL_MULTIPLE);
        let mut tape = Tape::<f32>::new();
        let vars = NamedVars::register(&mut tape, &self.weights, "g.", false);
        let x = tape.constant(to_network_range(&images_to_tensor::<f32>(&[&padded])?));
        let out = generator_forward(&mut tape, x, &vars, &self.config)?;
        let y = from_network_range(tape.value(out.image));
        if !y.is_finite() {
            return Err(Error::NonFinite {
                term: "generator output".into(),
                value: f64::NAN,
            });
        }
        tensor_to_image(&y, 0)?.crop(0, 0, img.width(), img.height())
    }

    /// [`Corrector::correct`] over many images, output in input order.
    pub fn correct_all(&self, imgs: &[ImageBuffer]) -> Result<Vec<ImageBuffer>> {
        imgs.par_iter().map(|i| self.correct(i)).collect()
    }
}
