use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_layout, check_spatial, fan_in_uniform, NamedVars};
use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::nn::{residual_block, ConvVars, NormVars, ResidualBlockConfig, ResidualBlockVars};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Encoder and decoder depth; each encoder stage halves the spatial extent.
pub const DEPTH: usize = 5;
const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub encoder_channels: [usize; DEPTH],
    pub n_residual_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_channels: [64, 128, 256, 512, 512],
            n_residual_blocks: 4,
        }
    }
}

/// Handles into a generator forward pass.
#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    /// Corrected image in `[-1, 1]`.
    pub image: Var,
    /// Encoder output before the residual blocks.
    pub bottleneck: Var,
    /// Post-activation output of each encoder stage.
    pub encoder: Vec<Var>,
}

fn enc(i: usize) -> String {
    format!("g.enc.{i}")
}

fn dec(i: usize) -> String {
    format!("g.dec.{i}")
}

fn res(i: usize) -> String {
    format!("g.res.{i}")
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder channels must be positive, got {:?}",
                self.encoder_channels
            )));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.encoder_channels[DEPTH - 1]
    }

    /// Output channels of decoder stage `i`.
    fn decoder_out(&self, i: usize) -> usize {
        if i + 1 == DEPTH {
            IMAGE_CHANNELS
        } else {
            self.encoder_channels[DEPTH - 2 - i]
        }
    }

    /// Every tensor the generator owns, with its shape.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let ch = &self.encoder_channels;
        let mut out = Vec::new();
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, c: usize| {
            out.push((format!("{prefix}.gamma"), vec![c]));
            out.push((format!("{prefix}.beta"), vec![c]));
        };
        let mut in_c = IMAGE_CHANNELS;
        for (i, &c) in ch.iter().enumerate() {
            out.push((format!("{}.w", enc(i)), vec![c, in_c, KERNEL, KERNEL]));
            norm(&mut out, format!("{}.in", enc(i)), c);
            in_c = c;
        }
        let c = self.bottleneck_channels();
        for r in 0..self.n_residual_blocks {
            for j in 1..=2 {
                out.push((format!("{}.conv{j}.w", res(r)), vec![c, c, 3, 3]));
                norm(&mut out, format!("{}.in{j}", res(r)), c);
            }
        }
        for i in 0..DEPTH {
            let (cin, cout) = (ch[DEPTH - 1 - i], self.decoder_out(i));
            out.push((format!("{}.w", dec(i)), vec![cin, cout, KERNEL, KERNEL]));
            if i + 1 == DEPTH {
                out.push((format!("{}.b", dec(i)), vec![cout]));
            } else {
                norm(&mut out, format!("{}.in", dec(i)), cout);
            }
        }
        out
    }

    /// Seeded fan-in uniform weights with identity instance-norm affines.
    pub fn init_weights<T: Real>(&self, seed: u64) -> Result<ModelWeights<T>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = ModelWeights::new();
        for (name, shape) in self.layout() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta") || name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else if name.starts_with("g.dec.") {
                // transposed conv: taps reaching one output pixel
                let fan_in = shape[0] * (KERNEL / STRIDE) * (KERNEL / STRIDE);
                fan_in_uniform(&shape, fan_in, &mut rng)
            } else {
                fan_in_uniform(&shape, shape[1..].iter().product(), &mut rng)
            };
            w.insert(name, t)?;
        }
        Ok(w)
    }

    /// Recovers the configuration from a weight bag.
    pub fn from_weights<T: Real>(weights: &ModelWeights<T>) -> Result<Self> {
        let mut encoder_channels = [0; DEPTH];
        for (i, c) in encoder_channels.iter_mut().enumerate() {
            *c = weights.require(&format!("{}.w", enc(i)))?.shape()[0];
        }
        let n_residual_blocks = (0..)
            .take_while(|r| weights.contains(&format!("{}.conv1.w", res(*r))))
            .count();
        let cfg = Self {
            encoder_channels,
            n_residual_blocks,
        };
        cfg.check_weights(weights)?;
        Ok(cfg)
    }

    pub fn check_weights<T: Real>(&self, weights: &ModelWeights<T>) -> Result<()> {
        check_layout(weights, "g.", &self.layout())
    }

    pub fn check_input(&self, input_shape: &[usize]) -> Result<()> {
        match *input_shape {
            [_, IMAGE_CHANNELS, h, w] => check_spatial("generator", h, w),
            _ => Err(Error::shape(
                "generator",
                format!("expected N x 3 x H x W input, got {input_shape:?}"),
            )),
        }
    }
}

/// Encoder, residual blocks, decoder with additive skips, final tanh.
///
/// The input of decoder stage `i` is the previous stage's output plus the
/// post-activation output of encoder stage `4 - i`, whose shape it mirrors.
pub fn generator_forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &NamedVars,
    cfg: &GeneratorConfig,
) -> Result<GeneratorOutput> {
    cfg.check_input(tape.value(x).shape())?;
    let norm = |prefix: String| -> Result<NormVars> {
        Ok(NormVars {
            gamma: vars.get(&format!("{prefix}.gamma"))?,
            beta: vars.get(&format!("{prefix}.beta"))?,
        })
    };

    let mut encoder = Vec::with_capacity(DEPTH);
    let mut h = x;
    for i in 0..DEPTH {
        h = tape.conv2d(h, vars.get(&format!("{}.w", enc(i)))?, None, STRIDE, PAD)?;
        h = norm(format!("{}.in", enc(i)))?.apply(tape, h)?;
        h = tape.relu(h);
        encoder.push(h);
    }
    let bottleneck = h;

    let block_cfg = ResidualBlockConfig::new(cfg.bottleneck_channels());
    for r in 0..cfg.n_residual_blocks {
        let conv = |j: usize| -> Result<ConvVars> {
            Ok(ConvVars {
                weight: vars.get(&format!("{}.conv{j}.w", res(r)))?,
                bias: None,
            })
        };
        let block = ResidualBlockVars {
            conv1: conv(1)?,
            norm1: Some(norm(format!("{}.in1", res(r)))?),
            conv2: conv(2)?,
            norm2: Some(norm(format!("{}.in2", res(r)))?),
        };
        h = residual_block(tape, h, &block_cfg, &block)?;
    }

    for i in 0..DEPTH {
        h = tape.add(h, encoder[DEPTH - 1 - i])?;
        let last = i + 1 == DEPTH;
        let bias = if last {
            Some(vars.get(&format!("{}.b", dec(i)))?)
        } else {
            None
        };
        h = tape.conv2d_transposed(h, vars.get(&format!("{}.w", dec(i)))?, bias, STRIDE, PAD)?;
        if last {
            h = tape.tanh(h);
        } else {
            h = norm(format!("{}.in", dec(i)))?.apply(tape, h)?;
            h = tape.relu(h);
        }
    }
    Ok(GeneratorOutput {
        image: h,
        bottleneck,
        encoder,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            encoder_channels: [4, 4, 8, 8, 8],
            n_residual_blocks: 2,
        }
    }

    fn run(cfg: &GeneratorConfig, shape: &[usize]) -> (Tape<f32>, GeneratorOutput) {
        let weights = cfg.init_weights::<f32>(3).unwrap();
        let mut tape = Tape::new();
        let vars = NamedVars::register(&mut tape, &weights, "g.", false);
        let x = tape.constant(Tensor::full(shape, 0.25));
        let out = generator_forward(&mut tape, x, &vars, cfg).unwrap();
        (tape, out)
    }

    #[test]
    fn shape_preserving_with_expected_bottleneck() {
        let (tape, out) = run(&tiny(), &[2, 3, 64, 96]);
        assert_eq!(tape.value(out.image).shape(), &[2, 3, 64, 96]);
        assert_eq!(tape.value(out.bottleneck).shape(), &[2, 8, 2, 3]);
        assert!(tape.value(out.image).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn rejects_extents_off_the_grid() {
        let cfg = tiny();
        let weights = cfg.init_weights::<f32>(0).unwrap();
        let mut tape = Tape::new();
        let vars = NamedVars::register(&mut tape, &weights, "g.", false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 48, 64]));
        let err = generator_forward(&mut tape, x, &vars, &cfg).unwrap_err();
        assert!(err.to_string().contains("pad by 16 rows"), "{err}");
    }

    #[test]
    fn config_round_trips_through_weights() {
        let cfg = tiny();
        let w = cfg.init_weights::<f32>(1).unwrap();
        assert_eq!(GeneratorConfig::from_weights(&w).unwrap(), cfg);
        let other = GeneratorConfig {
            n_residual_blocks: 1,
            ..tiny()
        };
        assert!(other.check_weights(&w).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        assert_eq!(
            cfg.init_weights::<f32>(9).unwrap(),
            cfg.init_weights::<f32>(9).unwrap()
        );
        assert_ne!(
            cfg.init_weights::<f32>(9).unwrap(),
            cfg.init_weights::<f32>(10).unwrap()
        );
    }

    #[test]
    fn zero_weights_give_mid_gray() {
        let cfg = tiny();
        let mut w = cfg.init_weights::<f32>(1).unwrap();
        let names: Vec<String> = w.names().map(str::to_string).collect();
        for name in names {
            if !name.ends_with(".gamma") {
                let t = w.get_mut(&name).unwrap();
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let vars = NamedVars::register(&mut tape, &w, "g.", false);
        let x = tape.constant(Tensor::full(&[1, 3, 32, 32], 0.7));
        let out = generator_forward(&mut tape, x, &vars, &cfg).unwrap();
        assert!(tape.value(out.image).data().iter().all(|&v| v == 0.0));
    }
}
