//! `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! errors, so a typo never silently falls back to a default.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{LossWeights, DEFAULT_EXTRACTOR, TAPS};
use crate::net::{DiscriminatorConfig, GeneratorConfig, SPATIAL_MULTIPLE};

/// Largest step count representable exactly in the checkpoint's f32 step slot.
pub const MAX_STEPS: u64 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub loss_weights: LossWeights,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    /// Perceptual extractor spec, see [`crate::losses::ExtractorRegistry`].
    pub perceptual_extractor: String,
    pub power_iterations: usize,
    pub hflip: bool,
    /// Fingerprint each network around the other's update and fail if it
    /// changed.
    pub check_isolation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            crop_size: 128,
            lr_g: 2e-4,
            lr_d: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 500,
            loss_weights: LossWeights::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual_extractor: DEFAULT_EXTRACTOR.to_string(),
            power_iterations: 1,
            hflip: true,
            check_isolation: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.len() != N {
        return Err(Error::Config(format!(
            "{key}: expected {N} comma-separated values, got {}",
            items.len()
        )));
    }
    let mut out = [T::default(); N];
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse(key, s)?;
    }
    Ok(out)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.steps > MAX_STEPS {
            return bad(format!(
                "steps must be in 1..={MAX_STEPS}, got {}",
                self.steps
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.crop_size < SPATIAL_MULTIPLE || !self.crop_size.is_multiple_of(SPATIAL_MULTIPLE) {
            return bad(format!(
                "crop_size must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                self.crop_size
            ));
        }
        for (k, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            // zero is allowed: it freezes a network
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{k} must be finite and >= 0, got {v}"));
            }
        }
        for (k, v) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must be in [0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be >= 1".into());
        }
        if self.power_iterations == 0 {
            return bad("power_iterations must be >= 1".into());
        }
        self.loss_weights.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "steps" => self.steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "crop_size" => self.crop_size = parse(key, v)?,
            "lr_g" => self.lr_g = parse(key, v)?,
            "lr_d" => self.lr_d = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "lambda_pixel" => self.loss_weights.lambda_pixel = parse(key, v)?,
            "beta_perceptual" => self.loss_weights.beta_perceptual = parse(key, v)?,
            "lambda_fm" => self.loss_weights.lambda_fm = parse(key, v)?,
            "perceptual_coeffs" => {
                self.loss_weights.perceptual_coeffs = parse_list::<f64, TAPS>(key, v)?
            }
            "perceptual_extractor" => self.perceptual_extractor = v.to_string(),
            "g_channels" => self.generator.encoder_channels = parse_list(key, v)?,
            "g_residual_blocks" => self.generator.n_residual_blocks = parse(key, v)?,
            "d_base_channels" => self.discriminator.base_channels = parse(key, v)?,
            "power_iterations" => self.power_iterations = parse(key, v)?,
            "hflip" => self.hflip = parse(key, v)?,
            "check_isolation" => self.check_isolation = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the assignments in `text`.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| {
                Error::Config(format!(
                    "line {}: {}",
                    n + 1,
                    e.to_string().trim_start_matches("invalid config: ")
                ))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Every key with its value; parses back to an identical config.
    pub fn to_config_string(&self) -> String {
        let w = &self.loss_weights;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("crop_size", self.crop_size.to_string());
        kv("lr_g", format!("{:e}", self.lr_g));
        kv("lr_d", format!("{:e}", self.lr_d));
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("adam_eps", format!("{:e}", self.adam_eps));
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        kv("lambda_pixel", w.lambda_pixel.to_string());
        kv("beta_perceptual", w.beta_perceptual.to_string());
        kv("lambda_fm", w.lambda_fm.to_string());
        kv("perceptual_coeffs", join(&w.perceptual_coeffs));
        kv("perceptual_extractor", self.perceptual_extractor.clone());
        kv("g_channels", join(&self.generator.encoder_channels));
        kv(
            "g_residual_blocks",
            self.generator.n_residual_blocks.to_string(),
        );
        kv(
            "d_base_channels",
            self.discriminator.base_channels.to_string(),
        );
        kv("power_iterations", self.power_iterations.to_string());
        kv("hflip", self.hflip.to_string());
        kv("check_isolation", self.check_isolation.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_gan_conventions() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.lr_g, c.lr_d, c.adam_beta1, c.adam_beta2),
            (2e-4, 2e-4, 0.5, 0.999)
        );
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let mut c = TrainConfig::default();
        c.steps = 7;
        c.loss_weights.perceptual_coeffs = [0.1, 0.2, 0.3, 0.4, 0.5];
        c.generator.encoder_channels = [8, 8, 16, 16, 16];
        c.perceptual_extractor = "avgpool-pyramid".into();
        assert_eq!(TrainConfig::parse_str(&c.to_config_string()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::parse_str("# toy\nsteps = 3   # short\n\ncrop_size=64\n").unwrap();
        assert_eq!((c.steps, c.crop_size), (3, 64));
        for (text, needle) in [
            ("stepz = 3", "unknown key"),
            ("steps = 3\nsteps = 4", "set twice"),
            ("steps", "expected key = value"),
            ("crop_size = 48", "multiple of 32"),
            ("steps = -1", "cannot parse"),
            ("g_channels = 1,2", "expected 5"),
            ("lr_g = -1", "lr_g"),
        ] {
            let err = TrainConfig::parse_str(text).unwrap_err().to_string();
            assert!(err.contains(needle), "{text}: {err}");
        }
    }
}
