//! The exposure-correction generator and the multi-scale discriminator.

mod discriminator;
mod generator;

use std::collections::BTreeMap;

use rand::Rng;

use crate::checkpoint::ModelWeights;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use discriminator::{
    discriminator_forward, DiscriminatorConfig, DiscriminatorOutput, ScaleOutput,
};
pub use generator::{generator_forward, GeneratorConfig, GeneratorOutput};

/// Spatial extents of network inputs must be multiples of this.
pub const SPATIAL_MULTIPLE: usize = 32;

/// Tape handles for a set of named weights.
#[derive(Debug, Clone, Default)]
pub struct NamedVars {
    vars: BTreeMap<String, Var>,
}

/// Non-trainable state stored alongside weights (power-iteration vectors).
pub fn is_buffer(name: &str) -> bool {
    name.contains(".sn_")
}

impl NamedVars {
    /// Records every tensor whose name starts with `prefix`. Trainable
    /// tensors become parameters when `trainable` is set, constants
    /// otherwise; buffers are always constants.
    pub fn register<T: Real>(
        tape: &mut Tape<T>,
        weights: &ModelWeights<T>,
        prefix: &str,
        trainable: bool,
    ) -> Self {
        let vars = weights
            .with_prefix(prefix)
            .map(|(name, t)| {
                let var = if trainable && !is_buffer(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.to_string(), var)
            })
            .collect();
        Self { vars }
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::WeightsMismatch(format!("missing tensor {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Checks that `weights` holds exactly the `expected` tensors, with the
/// expected shapes, under `prefix`.
pub(crate) fn check_layout<T: Real>(
    weights: &ModelWeights<T>,
    prefix: &str,
    expected: &[(String, Vec<usize>)],
) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in expected {
        match weights.get(name) {
            None => problems.push(format!("missing {name}")),
            Some(t) if t.shape() != shape.as_slice() => problems.push(format!(
                "{name} has shape {:?}, expected {shape:?}",
                t.shape()
            )),
            Some(_) => {}
        }
    }
    for (name, _) in weights.with_prefix(prefix) {
        if !expected.iter().any(|(n, _)| n == name) {
            problems.push(format!("unexpected {name}"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::WeightsMismatch(problems.join("; ")))
    }
}

/// Rejects spatial extents that are not positive multiples of 32, naming
/// the padding that would fix them.
pub fn check_spatial(op: &'static str, height: usize, width: usize) -> Result<()> {
    let pad = |e: usize| (SPATIAL_MULTIPLE - e % SPATIAL_MULTIPLE) % SPATIAL_MULTIPLE;
    if height == 0 || width == 0 || pad(height) != 0 || pad(width) != 0 {
        return Err(Error::shape(
            op,
            format!(
                "spatial extents {height}x{width} must be multiples of {SPATIAL_MULTIPLE}; \
                 pad by {} rows and {} columns",
                pad(height),
                pad(width)
            ),
        ));
    }
    Ok(())
}

/// Maps `[0, 1]` image values to the `[-1, 1]` network domain.
pub fn to_network_range<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let two = T::lit(2.0);
    t.map(|v| v * two - T::one())
}

/// Maps network outputs in `[-1, 1]` back to `[0, 1]`.
pub fn from_network_range<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    t.map(|v| (v + T::one()) * half)
}
