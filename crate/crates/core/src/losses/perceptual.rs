//! Frozen feature extractors for the perceptual loss.
//!
//! Extractors are interchangeable strategies behind [`FeatureExtractor`],
//! looked up by name in an [`ExtractorRegistry`]. A spec string has the form
//! `name` or `name:argument`:
//!
//! - `random-pyramid[:seed]`: five seeded random 3x3 stride-2 conv + ReLU
//!   stages with 16/32/64/128/128 channels.
//! - `avgpool-pyramid`: the image box-averaged by 2, 4, 8, 16 and 32.
//! - `imported:<path>`: a conv pyramid whose stage weights are read from a
//!   checkpoint file (`feat.stage{1..5}.w` and `.b`).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const TAPS: usize = 5;
pub const DEFAULT_EXTRACTOR: &str = "random-pyramid";
pub const DEFAULT_PYRAMID_SEED: u64 = 0x5eed_f00d;
const PYRAMID_CHANNELS: [usize; TAPS] = [16, 32, 64, 128, 128];

pub trait FeatureExtractor<T: Real>: Send + Sync {
    fn name(&self) -> &str;

    /// Records the extractor on `tape` and returns its five tap points, from
    /// shallow to deep. Extractor weights enter as constants.
    fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<[Var; TAPS]>;
}

/// Five conv + ReLU stages, each halving the spatial extent.
#[derive(Debug, Clone)]
pub struct ConvPyramid<T: Real> {
    name: String,
    stages: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Real> ConvPyramid<T> {
    /// He-uniform random stages, so activations keep their scale with depth.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_c = 3;
        let stages = PYRAMID_CHANNELS
            .iter()
            .map(|&out_c| {
                let fan_in = (in_c * 9) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let w = Tensor::uniform(&[out_c, in_c, 3, 3], -bound, bound, &mut rng);
                in_c = out_c;
                (w, Tensor::zeros(&[out_c]))
            })
            .collect();
        Self {
            name: format!("random-pyramid:{seed}"),
            stages,
        }
    }

    pub fn from_weights(name: impl Into<String>, weights: &ModelWeights<T>) -> Result<Self> {
        let mut stages = Vec::with_capacity(TAPS);
        let mut in_c = 3;
        for i in 1..=TAPS {
            let w = weights.require(&format!("feat.stage{i}.w"))?.clone();
            let b = weights.require(&format!("feat.stage{i}.b"))?.clone();
            let (out_c, c, kh, kw) = w.dims4()?;
            if c != in_c || kh != kw || kh % 2 == 0 || b.shape() != [out_c] {
                return Err(Error::WeightsMismatch(format!(
                    "feature stage {i}: weight {:?} / bias {:?} do not chain from {in_c} channels \
                     with an odd square kernel",
                    w.shape(),
                    b.shape()
                )));
            }
            in_c = out_c;
            stages.push((w, b));
        }
        Ok(Self {
            name: name.into(),
            stages,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let weights = ModelWeights::load(path)?.cast::<T>();
        Self::from_weights(format!("imported:{}", path.display()), &weights)
    }

    /// Stage weights in the importable checkpoint layout.
    pub fn to_weights(&self) -> ModelWeights<T> {
        let mut out = ModelWeights::new();
        for (i, (w, b)) in self.stages.iter().enumerate() {
            out.set(format!("feat.stage{}.w", i + 1), w.clone());
            out.set(format!("feat.stage{}.b", i + 1), b.clone());
        }
        out
    }
}

impl<T: Real> FeatureExtractor<T> for ConvPyramid<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<[Var; TAPS]> {
        let mut taps = [image; TAPS];
        let mut h = image;
        for (tap, (w, b)) in taps.iter_mut().zip(&self.stages) {
            let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
            let k = w.shape()[2];
            h = tape.conv2d(h, wv, Some(bv), 2, k / 2)?;
            h = tape.relu(h);
            *tap = h;
        }
        Ok(taps)
    }
}

/// Parameter-free pyramid of box-averaged images.
#[derive(Debug, Clone, Copy, Default)]
pub struct AvgPoolPyramid;

impl<T: Real> FeatureExtractor<T> for AvgPoolPyramid {
    fn name(&self) -> &str {
        "avgpool-pyramid"
    }

    fn extract(&self, tape: &mut Tape<T>, image: Var) -> Result<[Var; TAPS]> {
        let mut taps = [image; TAPS];
        let mut h = image;
        for tap in taps.iter_mut() {
            h = tape.downsample_avg(h, 2)?;
            *tap = h;
        }
        Ok(taps)
    }
}

pub type ExtractorFactory<T> = fn(Option<&str>) -> Result<Box<dyn FeatureExtractor<T>>>;

/// Name -> constructor table for perceptual feature extractors.
pub struct ExtractorRegistry<T: Real> {
    factories: BTreeMap<&'static str, ExtractorFactory<T>>,
}

fn build_random<T: Real>(arg: Option<&str>) -> Result<Box<dyn FeatureExtractor<T>>> {
    let seed = match arg {
        None => DEFAULT_PYRAMID_SEED,
        Some(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("random-pyramid seed {s:?} is not an integer")))?,
    };
    Ok(Box::new(ConvPyramid::<T>::random(seed)))
}

fn build_avgpool<T: Real>(arg: Option<&str>) -> Result<Box<dyn FeatureExtractor<T>>> {
    if let Some(a) = arg {
        return Err(Error::Config(format!(
            "avgpool-pyramid takes no argument, got {a:?}"
        )));
    }
    Ok(Box::new(AvgPoolPyramid))
}

fn build_imported<T: Real>(arg: Option<&str>) -> Result<Box<dyn FeatureExtractor<T>>> {
    let path = arg
        .ok_or_else(|| Error::Config("imported extractor needs a path: imported:<file>".into()))?;
    Ok(Box::new(ConvPyramid::<T>::load(Path::new(path))?))
}

impl<T: Real> Default for ExtractorRegistry<T> {
    fn default() -> Self {
        let mut reg = Self {
            factories: BTreeMap::new(),
        };
        reg.register("random-pyramid", build_random::<T>);
        reg.register("avgpool-pyramid", build_avgpool::<T>);
        reg.register("imported", build_imported::<T>);
        reg
    }
}

impl<T: Real> ExtractorRegistry<T> {
    pub fn register(&mut self, name: &'static str, factory: ExtractorFactory<T>) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.factories.keys().copied()
    }

    /// Builds the extractor named by `spec` (`name` or `name:argument`).
    pub fn build(&self, spec: &str) -> Result<Box<dyn FeatureExtractor<T>>> {
        let (name, arg) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (spec, None),
        };
        let factory = self.factories.get(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown perceptual extractor {name:?}; known: {}",
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(arg)
    }
}
