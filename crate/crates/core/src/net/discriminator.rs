use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_layout, check_spatial, fan_in_uniform, NamedVars};
use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::nn::{SpectralNormState, LEAKY_RELU_SLOPE, SIGMA_FLOOR};
use crate::tensor::{Real, Tape, Tensor, Var};

const IMAGE_CHANNELS: usize = 3;

/// One convolution of a per-scale discriminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpec {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub n_scales: usize,
    pub base_channels: usize,
    pub n_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            n_scales: 3,
            base_channels: 64,
            n_layers: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScaleOutput {
    /// Single-channel realism scores, one per receptive-field patch.
    pub patch_map: Var,
    /// Output of every layer, the last being the patch map.
    pub features: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Finest scale first.
    pub scales: Vec<ScaleOutput>,
    /// Spectral-norm estimate applied to each conv weight, in use order.
    pub spectral_sigmas: Vec<(String, f64)>,
}

impl DiscriminatorOutput {
    pub fn patch_maps(&self) -> Vec<Var> {
        self.scales.iter().map(|s| s.patch_map).collect()
    }

    pub fn features(&self) -> Vec<Vec<Var>> {
        self.scales.iter().map(|s| s.features.clone()).collect()
    }
}

pub(crate) fn layer_prefix(scale: usize, layer: usize) -> String {
    format!("d.scale{}.layer{}", scale + 1, layer + 1)
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales != 3 || self.n_layers != 5 {
            return Err(Error::Config(format!(
                "discriminator must have 3 scales of 5 layers, got {} x {}",
                self.n_scales, self.n_layers
            )));
        }
        if self.base_channels == 0 {
            return Err(Error::Config(
                "discriminator base channels must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Three stride-2 4x4 convs (8x downsampling), an extent-preserving 3x3
    /// conv, and a 1x1 projection to one channel.
    fn layers(&self) -> [LayerSpec; 5] {
        let b = self.base_channels;
        let spec = |in_c, out_c, kernel, stride, pad| LayerSpec {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
        };
        [
            spec(IMAGE_CHANNELS, b, 4, 2, 1),
            spec(b, 2 * b, 4, 2, 1),
            spec(2 * b, 4 * b, 4, 2, 1),
            spec(4 * b, 8 * b, 3, 1, 1),
            spec(8 * b, 1, 1, 1, 0),
        ]
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for s in 0..self.n_scales {
            for (l, spec) in self.layers().iter().enumerate() {
                let p = layer_prefix(s, l);
                let fan = spec.in_c * spec.kernel * spec.kernel;
                out.push((
                    format!("{p}.w"),
                    vec![spec.out_c, spec.in_c, spec.kernel, spec.kernel],
                ));
                out.push((format!("{p}.b"), vec![spec.out_c]));
                out.push((format!("{p}.sn_u"), vec![spec.out_c]));
                out.push((format!("{p}.sn_v"), vec![fan]));
            }
        }
        out
    }

    pub fn init_weights<T: Real>(&self, seed: u64) -> Result<ModelWeights<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::new();
        for s in 0..self.n_scales {
            for (l, spec) in self.layers().iter().enumerate() {
                let p = layer_prefix(s, l);
                let fan = spec.in_c * spec.kernel * spec.kernel;
                let shape = [spec.out_c, spec.in_c, spec.kernel, spec.kernel];
                w.insert(format!("{p}.w"), fan_in_uniform(&shape, fan, &mut rng))?;
                w.insert(format!("{p}.b"), Tensor::zeros(&[spec.out_c]))?;
                let sn = SpectralNormState::<T>::new(spec.out_c, fan, &mut rng);
                w.insert(format!("{p}.sn_u"), Tensor::from_vec(&[spec.out_c], sn.u))?;
                w.insert(format!("{p}.sn_v"), Tensor::from_vec(&[fan], sn.v))?;
            }
        }
        Ok(w)
    }

    pub fn from_weights<T: Real>(weights: &ModelWeights<T>) -> Result<Self> {
        let base = weights
            .require(&format!("{}.w", layer_prefix(0, 0)))?
            .shape()[0];
        let cfg = Self {
            base_channels: base,
            ..Self::default()
        };
        cfg.check_weights(weights)?;
        Ok(cfg)
    }

    pub fn check_weights<T: Real>(&self, weights: &ModelWeights<T>) -> Result<()> {
        check_layout(weights, "d.", &self.layout())
    }

    /// Patch-map extent per scale for a square input of `extent`.
    pub fn patch_extents(&self, extent: usize) -> Vec<usize> {
        (0..self.n_scales).map(|s| extent >> (s + 3)).collect()
    }

    /// Advances every layer's persistent power-iteration vectors.
    pub fn power_iterate<T: Real>(
        &self,
        weights: &mut ModelWeights<T>,
        iterations: usize,
    ) -> Result<()> {
        for s in 0..self.n_scales {
            for l in 0..self.n_layers {
                let p = layer_prefix(s, l);
                let (un, vn) = (format!("{p}.sn_u"), format!("{p}.sn_v"));
                let mut state = SpectralNormState {
                    u: weights.require(&un)?.data().to_vec(),
                    v: weights.require(&vn)?.data().to_vec(),
                    n_power_iterations: iterations.max(1),
                };
                state.power_iterate(weights.require(&format!("{p}.w"))?)?;
                weights.set(un.clone(), Tensor::from_vec(&[state.u.len()], state.u));
                weights.set(vn.clone(), Tensor::from_vec(&[state.v.len()], state.v));
            }
        }
        Ok(())
    }
}

/// Runs the three per-scale discriminators on `x` average-pooled by 1, 2
/// and 4. Every conv weight is divided by its spectral-norm estimate from
/// the stored power-iteration vectors before use.
pub fn discriminator_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &NamedVars,
    cfg: &DiscriminatorConfig,
) -> Result<DiscriminatorOutput> {
    cfg.validate()?;
    match *tape.value(x).shape() {
        [_, IMAGE_CHANNELS, h, w] => check_spatial("discriminator", h, w)?,
        ref other => {
            return Err(Error::shape(
                "discriminator",
                format!("expected N x 3 x H x W input, got {other:?}"),
            ))
        }
    }
    let mut scales = Vec::with_capacity(cfg.n_scales);
    let mut sigmas = Vec::new();
    for s in 0..cfg.n_scales {
        let mut h = if s == 0 {
            x
        } else {
            tape.downsample_avg(x, 1 << s)?
        };
        let mut features = Vec::with_capacity(cfg.n_layers);
        let layers = cfg.layers();
        for (l, spec) in layers.iter().enumerate() {
            let p = layer_prefix(s, l);
            let u = tape.value(vars.get(&format!("{p}.sn_u"))?).data().to_vec();
            let v = tape.value(vars.get(&format!("{p}.sn_v"))?).data().to_vec();
            let (w, sigma) =
                tape.spectral_scale(vars.get(&format!("{p}.w"))?, &u, &v, SIGMA_FLOOR)?;
            sigmas.push((format!("{p}.w"), sigma.as_f64()));
            let b = vars.get(&format!("{p}.b"))?;
            h = tape.conv2d(h, w, Some(b), spec.stride, spec.pad)?;
            if l + 1 < layers.len() {
                h = tape.leaky_relu(h, LEAKY_RELU_SLOPE);
            }
            features.push(h);
        }
        scales.push(ScaleOutput {
            patch_map: h,
            features,
        });
    }
    Ok(DiscriminatorOutput {
        scales,
        spectral_sigmas: sigmas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DiscriminatorConfig {
        DiscriminatorConfig {
            base_channels: 4,
            ..Default::default()
        }
    }

    #[test]
    fn patch_maps_shrink_by_eight_per_scale_step() {
        let cfg = small();
        let w = cfg.init_weights::<f32>(0).unwrap();
        let mut tape = Tape::new();
        let vars = NamedVars::register(&mut tape, &w, "d.", false);
        let x = tape.constant(Tensor::full(&[1, 3, 128, 128], 0.1));
        let out = discriminator_forward(&mut tape, x, &vars, &cfg).unwrap();
        let extents: Vec<usize> = out
            .scales
            .iter()
            .map(|s| tape.value(s.patch_map).shape()[2])
            .collect();
        assert_eq!(extents, vec![16, 8, 4]);
        assert_eq!(cfg.patch_extents(128), extents);
        for s in &out.scales {
            assert_eq!(s.features.len(), 5);
            assert_eq!(tape.value(s.patch_map).shape()[1], 1);
        }
        assert_eq!(out.spectral_sigmas.len(), 15);
    }

    #[test]
    fn power_iteration_updates_buffers_only() {
        let cfg = small();
        let mut w = cfg.init_weights::<f64>(1).unwrap();
        let before = w.clone();
        cfg.power_iterate(&mut w, 3).unwrap();
        let mut buffers_changed = 0;
        for (name, t) in w.iter() {
            let changed = t != before.get(name).unwrap();
            if super::super::is_buffer(name) {
                buffers_changed += usize::from(changed);
            } else {
                assert!(!changed, "{name}");
            }
        }
        assert!(buffers_changed > 0);
    }

    #[test]
    fn config_recovered_from_weights() {
        let cfg = small();
        let w = cfg.init_weights::<f32>(2).unwrap();
        assert_eq!(DiscriminatorConfig::from_weights(&w).unwrap(), cfg);
    }
}
