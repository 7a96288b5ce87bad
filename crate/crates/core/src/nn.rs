//! Layer building blocks shared by the generator, discriminator and the
//! perceptual feature extractor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Lower bound on the spectral-norm estimate.
pub const SIGMA_FLOOR: f64 = 1e-12;

pub const LEAKY_RELU_SLOPE: f64 = 0.2;

/// Affine parameters of an instance-normalization layer.
#[derive(Debug, Clone)]
pub struct InstanceNormState<T: Real = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Real> InstanceNormState<T> {
    /// Identity affine (`gamma = 1`, `beta = 0`).
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            epsilon: INSTANCE_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Detached instance normalization.
pub fn instance_norm<T: Real>(
    input: &Tensor<T>,
    state: &InstanceNormState<T>,
) -> Result<Tensor<T>> {
    if state.epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "instance norm epsilon must be positive, got {}",
            state.epsilon
        )));
    }
    if state.gamma.shape() != state.beta.shape() {
        return Err(Error::shape(
            "instance_norm",
            format!(
                "gamma {:?} and beta {:?} differ",
                state.gamma.shape(),
                state.beta.shape()
            ),
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(state.gamma.clone());
    let b = tape.constant(state.beta.clone());
    let y = tape.instance_norm(x, Some(g), Some(b), state.epsilon)?;
    Ok(tape.value(y).clone())
}

/// Tape handles of an instance-norm layer's affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl NormVars {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.instance_norm(x, Some(self.gamma), Some(self.beta), INSTANCE_NORM_EPS)
    }
}

/// Tape handles of a convolution's weight and optional bias.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Persistent power-iteration state for one weight matrix, viewed as
/// `out_features x rest`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNormState<T: Real = f32> {
    pub u: Vec<T>,
    pub v: Vec<T>,
    pub n_power_iterations: usize,
}

fn normalize_into<T: Real>(src: Vec<T>, dst: &mut Vec<T>) -> bool {
    let norm = crate::tensor::kernels::dot(&src, &src).sqrt();
    if norm.as_f64() < SIGMA_FLOOR {
        return false;
    }
    *dst = src.into_iter().map(|x| x / norm).collect();
    true
}

fn unit_vector<T: Real, R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<T> {
    loop {
        let raw: Vec<T> = (0..len).map(|_| T::lit(rng.gen_range(-1.0..1.0))).collect();
        let mut out = Vec::new();
        if normalize_into(raw, &mut out) {
            return out;
        }
    }
}

impl<T: Real> SpectralNormState<T> {
    pub fn new<R: Rng + ?Sized>(out_features: usize, in_features: usize, rng: &mut R) -> Self {
        Self {
            u: unit_vector(out_features, rng),
            v: unit_vector(in_features, rng),
            n_power_iterations: 1,
        }
    }

    pub fn with_iterations(mut self, n: usize) -> Self {
        self.n_power_iterations = n.max(1);
        self
    }

    fn matrix_dims(&self, weight: &Tensor<T>) -> Result<(usize, usize)> {
        let rows = weight.shape()[0];
        let cols = weight.numel() / rows;
        if rows != self.u.len() || cols != self.v.len() {
            return Err(Error::shape(
                "spectral_normalize",
                format!(
                    "weight {:?} is {rows}x{cols} but state holds u[{}], v[{}]",
                    weight.shape(),
                    self.u.len(),
                    self.v.len()
                ),
            ));
        }
        Ok((rows, cols))
    }

    /// Runs `n_power_iterations` updates of `v <- W^T u / |W^T u|`,
    /// `u <- W v / |W v|`. A zero matrix leaves the estimates untouched.
    pub fn power_iterate(&mut self, weight: &Tensor<T>) -> Result<()> {
        let (rows, cols) = self.matrix_dims(weight)?;
        let w = weight.data();
        for _ in 0..self.n_power_iterations {
            let mut wt_u = vec![T::zero(); cols];
            for (row, &ui) in w.chunks(cols).zip(&self.u) {
                for (acc, &x) in wt_u.iter_mut().zip(row) {
                    *acc += x * ui;
                }
            }
            if !normalize_into(wt_u, &mut self.v) {
                return Ok(());
            }
            let w_v: Vec<T> = w
                .chunks(cols)
                .map(|row| crate::tensor::kernels::dot(row, &self.v))
                .collect();
            debug_assert_eq!(w_v.len(), rows);
            if !normalize_into(w_v, &mut self.u) {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Current estimate `u^T W v` of the largest singular value.
    pub fn sigma(&self, weight: &Tensor<T>) -> Result<T> {
        self.matrix_dims(weight)?;
        Ok(crate::tensor::bilinear(weight.data(), &self.u, &self.v))
    }
}

/// Power-iterates `state` against `weight` and returns `weight / sigma`.
/// The input weight is not modified.
pub fn spectral_normalize<T: Real>(
    weight: &Tensor<T>,
    state: &mut SpectralNormState<T>,
) -> Result<Tensor<T>> {
    state.power_iterate(weight)?;
    let sigma = state.sigma(weight)?.max(T::lit(SIGMA_FLOOR));
    Ok(weight.map(|x| x / sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResidualBlockConfig {
    pub channels: usize,
    pub kernel: usize,
    pub norm: bool,
}

impl ResidualBlockConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel: 3,
            norm: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ResidualBlockVars {
    pub conv1: ConvVars,
    pub norm1: Option<NormVars>,
    pub conv2: ConvVars,
    pub norm2: Option<NormVars>,
}

/// `x + F(x)` with `F = pad -> conv -> norm -> relu -> pad -> conv -> norm`,
/// reflection padding keeping the spatial extent.
pub fn residual_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &ResidualBlockConfig,
    vars: &ResidualBlockVars,
) -> Result<Var> {
    let channels = tape.value(x).dims4()?.1;
    if channels != cfg.channels {
        return Err(Error::shape(
            "residual_block",
            format!(
                "input {:?} has {channels} channels, block expects {}",
                tape.value(x).shape(),
                cfg.channels
            ),
        ));
    }
    if cfg.kernel.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "residual block kernel must be odd, got {}",
            cfg.kernel
        )));
    }
    let pad = cfg.kernel / 2;
    let mut h = x;
    for (i, (conv, norm)) in [(vars.conv1, vars.norm1), (vars.conv2, vars.norm2)]
        .into_iter()
        .enumerate()
    {
        if pad > 0 {
            h = tape.reflect_pad(h, pad)?;
        }
        h = tape.conv2d(h, conv.weight, conv.bias, 1, 0)?;
        if cfg.norm {
            let norm = norm.ok_or_else(|| {
                Error::InvalidArgument(
                    "residual block configured with norm but no norm params".into(),
                )
            })?;
            h = norm.apply(tape, h)?;
        }
        if i == 0 {
            h = tape.relu(h);
        }
    }
    tape.add(x, h)
}
