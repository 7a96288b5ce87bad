//! Alternating discriminator / generator optimization with checkpointing.
//!
//! Every step draws its batch and augmentation from an RNG keyed by
//! `(seed, step)`, so a run resumed from a checkpoint replays the exact
//! trajectory of an uninterrupted one without storing RNG state.

mod config;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{TrainConfig, MAX_STEPS};

use crate::checkpoint::{write_atomic, ModelWeights};
use crate::error::{Error, Result};
use crate::imaging::{
    images_to_tensor, load_image, random_crop_pair, random_flip_pair, DatasetIndex, ImageBuffer,
};
use crate::infer::Corrector;
use crate::losses::{
    adversarial_loss_d, adversarial_loss_g, feature_matching_loss, perceptual_loss, pixel_loss,
    total_generator_loss, ExtractorRegistry, FeatureExtractor, LossParts,
};
use crate::metrics::psnr;
use crate::net::{
    discriminator_forward, generator_forward, is_buffer, to_network_range, DiscriminatorConfig,
    GeneratorConfig, NamedVars,
};
use crate::tensor::{Gradients, Real, Tape, Tensor};

pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.txt";

const STEP_TENSOR: &str = "train.step";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";
const D_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EPOCH_STREAM: u64 = 1 << 63;

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:06}.expw")
}

/// Component losses of one step, evaluated before that step's updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Zero-based index of the step.
    pub step: u64,
    pub adv_d: f64,
    pub adv_g: f64,
    pub fm: f64,
    pub pixel: f64,
    pub perceptual: f64,
}

/// Everything needed to continue training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed steps.
    pub step: u64,
    /// Generator (`g.`) and discriminator (`d.`) tensors.
    pub weights: ModelWeights<f32>,
    pub adam_m: ModelWeights<f32>,
    pub adam_v: ModelWeights<f32>,
}

impl TrainState {
    /// Freshly initialized networks with zero moments.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut weights = cfg.generator.init_weights::<f32>(cfg.seed)?;
        weights.merge(cfg.discriminator.init_weights(cfg.seed ^ D_SEED_SALT)?)?;
        let (mut adam_m, mut adam_v) = (ModelWeights::new(), ModelWeights::new());
        for (name, t) in weights.iter().filter(|(n, _)| !is_buffer(n)) {
            adam_m.insert(name, Tensor::zeros(t.shape()))?;
            adam_v.insert(name, Tensor::zeros(t.shape()))?;
        }
        Ok(Self {
            step: 0,
            weights,
            adam_m,
            adam_v,
        })
    }

    pub fn to_weights(&self) -> ModelWeights<f32> {
        let mut out = self.weights.clone();
        for (name, t) in self.adam_m.iter() {
            out.set(format!("{ADAM_M}{name}"), t.clone());
        }
        for (name, t) in self.adam_v.iter() {
            out.set(format!("{ADAM_V}{name}"), t.clone());
        }
        out.set(STEP_TENSOR, Tensor::from_vec(&[1], vec![self.step as f32]));
        out
    }

    pub fn from_weights(all: &ModelWeights<f32>) -> Result<Self> {
        let mut state = Self {
            step: 0,
            weights: ModelWeights::new(),
            adam_m: ModelWeights::new(),
            adam_v: ModelWeights::new(),
        };
        let mut step = None;
        for (name, t) in all.iter() {
            if let Some(n) = name.strip_prefix(ADAM_M) {
                state.adam_m.insert(n, t.clone())?;
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                state.adam_v.insert(n, t.clone())?;
            } else if name == STEP_TENSOR {
                step = Some(t.data().first().copied().unwrap_or(f32::NAN));
            } else {
                state.weights.insert(name, t.clone())?;
            }
        }
        let step = step.ok_or_else(|| {
            Error::WeightsMismatch(format!("not a training checkpoint: no {STEP_TENSOR}"))
        })?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::WeightsMismatch(format!("bad step count {step}")));
        }
        state.step = step as u64;
        for (name, t) in state.weights.iter().filter(|(n, _)| !is_buffer(n)) {
            for (kind, moments) in [("first", &state.adam_m), ("second", &state.adam_v)] {
                match moments.get(name) {
                    Some(m) if m.shape() == t.shape() => {}
                    _ => {
                        return Err(Error::WeightsMismatch(format!(
                            "missing or misshapen {kind} moment for {name}"
                        )))
                    }
                }
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_weights().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weights(&ModelWeights::load(path)?)
    }

    /// Errors unless the stored networks have exactly the configured shape.
    pub fn check_config(&self, cfg: &TrainConfig) -> Result<()> {
        let g = GeneratorConfig::from_weights(&self.weights.subset("g."))?;
        let d = DiscriminatorConfig::from_weights(&self.weights.subset("d."))?;
        if g != cfg.generator || d != cfg.discriminator {
            return Err(Error::WeightsMismatch(format!(
                "checkpoint networks {g:?} / {d:?} differ from config {:?} / {:?}",
                cfg.generator, cfg.discriminator
            )));
        }
        Ok(())
    }
}

fn finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            value,
        })
    }
}

/// One bias-corrected Adam step on every trainable tensor in `vars`.
fn adam_update(
    state: &mut TrainState,
    cfg: &TrainConfig,
    vars: &NamedVars,
    grads: &Gradients<f32>,
    lr: f64,
    t: u64,
) -> Result<()> {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powf(t as f64);
    let bc2 = 1.0 - b2.powf(t as f64);
    // bias corrections folded into the step size and epsilon
    let step = (lr * bc2.sqrt() / bc1) as f32;
    let eps = (cfg.adam_eps * bc2.sqrt()) as f32;
    let (b1, b2) = (b1 as f32, b2 as f32);
    let (c1, c2) = (1.0 - b1, 1.0 - b2);
    for (name, var) in vars.iter().filter(|(n, _)| !is_buffer(n)) {
        let g = grads
            .get(var)
            .ok_or_else(|| Error::Invariant(format!("no gradient reached {name}")))?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                term: format!("gradient of {name}"),
                value: f64::NAN,
            });
        }
        let missing = || Error::WeightsMismatch(format!("no optimizer state for {name}"));
        let w = state.weights.get_mut(name).ok_or_else(missing)?.data_mut();
        let m = state.adam_m.get_mut(name).ok_or_else(missing)?.data_mut();
        let v = state.adam_v.get_mut(name).ok_or_else(missing)?.data_mut();
        if w.len() != g.numel() {
            return Err(Error::Invariant(format!(
                "gradient of {name} has the wrong size"
            )));
        }
        for (((w, m), v), &g) in w
            .iter_mut()
            .zip(m.iter_mut())
            .zip(v.iter_mut())
            .zip(g.data())
        {
            *m = b1 * *m + c1 * g;
            *v = b2 * *v + c2 * g * g;
            *w -= step * *m / (v.sqrt() + eps);
        }
    }
    Ok(())
}

/// Owns the training state and the frozen perceptual extractor.
pub struct Trainer {
    config: TrainConfig,
    extractor: Box<dyn FeatureExtractor<f32>>,
    state: TrainState,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = TrainState::init(&config)?;
        Self::with_state(config, state)
    }

    pub fn with_state(config: TrainConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        state.check_config(&config)?;
        let extractor = ExtractorRegistry::<f32>::default().build(&config.perceptual_extractor)?;
        Ok(Self {
            config,
            extractor,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    /// One discriminator update on detached fakes, then one generator
    /// update against the updated discriminator.
    pub fn step(&mut self, batch: &[(ImageBuffer, ImageBuffer)]) -> Result<LossRecord> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let cfg = self.config.clone();
        let inputs: Vec<&ImageBuffer> = batch.iter().map(|(i, _)| i).collect();
        let targets: Vec<&ImageBuffer> = batch.iter().map(|(_, t)| t).collect();
        let x = to_network_range(&images_to_tensor::<f32>(&inputs)?);
        let y = to_network_range(&images_to_tensor::<f32>(&targets)?);
        if x.shape() != y.shape() {
            return Err(Error::InvalidArgument(format!(
                "inputs {:?} and targets {:?} differ in shape",
                x.shape(),
                y.shape()
            )));
        }
        let t = self.state.step + 1;
        cfg.discriminator
            .power_iterate(&mut self.state.weights, cfg.power_iterations)?;

        // The generator graph is built once and reused for its own update;
        // the discriminator half-step only sees a copy of its output.
        let mut gt = Tape::<f32>::new();
        let g_vars = NamedVars::register(&mut gt, &self.state.weights, "g.", true);
        let x_var = gt.constant(x);
        let y_var = gt.constant(y.clone());
        let fake = generator_forward(&mut gt, x_var, &g_vars, &cfg.generator)?.image;

        let g_print = cfg
            .check_isolation
            .then(|| self.state.weights.subset("g.").fingerprint());
        let adv_d = {
            let mut dt = Tape::<f32>::new();
            let d_vars = NamedVars::register(&mut dt, &self.state.weights, "d.", true);
            let fake_c = dt.constant(gt.value(fake).clone());
            let real_c = dt.constant(y);
            let real = discriminator_forward(&mut dt, real_c, &d_vars, &cfg.discriminator)?;
            let fake = discriminator_forward(&mut dt, fake_c, &d_vars, &cfg.discriminator)?;
            let loss = adversarial_loss_d(&mut dt, &real.patch_maps(), &fake.patch_maps())?;
            let value = finite("adv_d", dt.value(loss).item().as_f64())?;
            let grads = dt.backward(loss)?;
            // the tape shares the weight buffers; release them so the update
            // writes in place instead of copying
            drop(dt);
            adam_update(&mut self.state, &cfg, &d_vars, &grads, cfg.lr_d, t)?;
            value
        };
        if let Some(before) = g_print {
            if self.state.weights.subset("g.").fingerprint() != before {
                return Err(Error::Invariant(
                    "discriminator update changed generator weights".into(),
                ));
            }
        }

        let d_print = cfg
            .check_isolation
            .then(|| self.state.weights.subset("d.").fingerprint());
        let d_vars = NamedVars::register(&mut gt, &self.state.weights, "d.", false);
        let real = discriminator_forward(&mut gt, y_var, &d_vars, &cfg.discriminator)?;
        let judged = discriminator_forward(&mut gt, fake, &d_vars, &cfg.discriminator)?;
        let parts = LossParts {
            adversarial: adversarial_loss_g(&mut gt, &judged.patch_maps())?,
            feature_matching: feature_matching_loss(&mut gt, &real.features(), &judged.features())?,
            pixel: pixel_loss(&mut gt, fake, y_var)?,
            perceptual: perceptual_loss(
                &mut gt,
                fake,
                y_var,
                self.extractor.as_ref(),
                &cfg.loss_weights.perceptual_coeffs,
            )?,
        };
        let v = parts.values(&gt);
        let record = LossRecord {
            step: self.state.step,
            adv_d,
            adv_g: finite("adv_g", v.adversarial)?,
            fm: finite("fm", v.feature_matching)?,
            pixel: finite("pixel", v.pixel)?,
            perceptual: finite("perceptual", v.perceptual)?,
        };
        let total = total_generator_loss(&mut gt, &parts, &cfg.loss_weights)?;
        let grads = gt.backward(total)?;
        drop(gt);
        adam_update(&mut self.state, &cfg, &g_vars, &grads, cfg.lr_g, t)?;
        if let Some(before) = d_print {
            if self.state.weights.subset("d.").fingerprint() != before {
                return Err(Error::Invariant(
                    "generator update changed discriminator weights".into(),
                ));
            }
        }
        self.state.step = t;
        Ok(record)
    }
}

/// Indexed (input, target) pairs.
pub trait PairSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair `index`, both as RGB.
    fn load(&self, index: usize) -> Result<(ImageBuffer, ImageBuffer)>;
}

/// Pairs held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryPairs(pub Vec<(ImageBuffer, ImageBuffer)>);

impl PairSource for MemoryPairs {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn load(&self, index: usize) -> Result<(ImageBuffer, ImageBuffer)> {
        let (i, t) = &self.0[index];
        Ok((i.to_rgb(), t.to_rgb()))
    }
}

/// Pairs decoded from disk on every access.
impl PairSource for DatasetIndex {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn load(&self, index: usize) -> Result<(ImageBuffer, ImageBuffer)> {
        let r = &self.records[index];
        Ok((
            load_image(&r.input)?.to_rgb(),
            load_image(&r.target)?.to_rgb(),
        ))
    }
}

/// The augmented batch for `step`: pairs are visited in a fresh
/// permutation each epoch, then randomly cropped and optionally flipped.
pub fn sample_batch(
    cfg: &TrainConfig,
    source: &dyn PairSource,
    step: u64,
) -> Result<Vec<(ImageBuffer, ImageBuffer)>> {
    let n = source.len();
    if n == 0 {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step);
    let mut perm: Option<(u64, Vec<usize>)> = None;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for k in 0..cfg.batch_size as u64 {
        let slot = step * cfg.batch_size as u64 + k;
        let epoch = slot / n as u64;
        if perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..n).collect();
            let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed);
            erng.set_stream(EPOCH_STREAM | epoch);
            order.shuffle(&mut erng);
            perm = Some((epoch, order));
        }
        let idx = perm
            .as_ref()
            .map(|(_, o)| o[(slot % n as u64) as usize])
            .unwrap_or(0);
        let (input, target) = source.load(idx)?;
        let (input, target) = random_crop_pair(&input, &target, cfg.crop_size, &mut rng)
            .map_err(|e| Error::Dataset(format!("pair {idx}: {e}")))?;
        batch.push(if cfg.hflip {
            random_flip_pair(input, target, &mut rng)
        } else {
            (input, target)
        });
    }
    Ok(batch)
}

fn losses_csv(records: &[LossRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if records.is_empty() {
        w.write_record(["step", "adv_d", "adv_g", "fm", "pixel", "perceptual"])
            .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
    }
    for r in records {
        w.serialize(r)
            .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))
}

pub fn read_losses(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Dataset(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    /// Every step's losses, including those replayed from a resumed run.
    pub records: Vec<LossRecord>,
    pub state: TrainState,
}

/// Trains up to `cfg.steps`, writing `config.txt`, `losses.csv` and a
/// checkpoint every `checkpoint_every` steps (and after the last) into
/// `out_dir`. With `resume`, training continues from that checkpoint and
/// earlier rows of an existing `losses.csv` are kept.
pub fn run_training(
    cfg: &TrainConfig,
    source: &dyn PairSource,
    out_dir: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_atomic(
        &out_dir.join(CONFIG_FILE),
        cfg.to_config_string().as_bytes(),
    )?;
    let losses_path = out_dir.join(LOSSES_FILE);

    let (mut trainer, mut records, mut last) = match resume {
        Some(path) => {
            let state = TrainState::load(path)?;
            let mut records = if losses_path.exists() {
                read_losses(&losses_path)?
            } else {
                Vec::new()
            };
            records.retain(|r| r.step < state.step);
            (
                Trainer::with_state(cfg.clone(), state)?,
                records,
                Some(path.to_path_buf()),
            )
        }
        None => (Trainer::new(cfg.clone())?, Vec::new(), None),
    };

    while trainer.state.step < cfg.steps {
        let batch = sample_batch(cfg, source, trainer.state.step)?;
        let record = trainer.step(&batch)?;
        on_step(&record);
        records.push(record);
        let done = trainer.state.step;
        if done % cfg.checkpoint_every == 0 || done == cfg.steps {
            let path = out_dir.join(checkpoint_name(done));
            trainer.state.save(&path)?;
            write_atomic(&losses_path, &losses_csv(&records)?)?;
            last = Some(path);
        }
    }
    let final_checkpoint =
        last.ok_or_else(|| Error::InvalidArgument("no training steps were run".into()))?;
    Ok(TrainOutcome {
        final_checkpoint,
        records,
        state: trainer.into_state(),
    })
}

/// Pixel fidelity of the generator on one full-size pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    /// Mean absolute error in `[0, 1]` units.
    pub l1: f64,
    pub psnr: f64,
}

pub fn evaluate_pairs(
    corrector: &Corrector,
    pairs: &[(ImageBuffer, ImageBuffer)],
) -> Result<Vec<PairScore>> {
    let inputs: Vec<ImageBuffer> = pairs.iter().map(|(i, _)| i.clone()).collect();
    let outputs = corrector.correct_all(&inputs)?;
    outputs
        .iter()
        .zip(pairs)
        .map(|(out, (_, target))| {
            let target = target.to_rgb();
            let l1 = out
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / out.data().len() as f64;
            Ok(PairScore {
                l1,
                psnr: psnr(out, &target, 1.0)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.steps = 3;
        c.crop_size = 32;
        c.checkpoint_every = 2;
        c.generator.encoder_channels = [2, 3, 3, 4, 4];
        c.generator.n_residual_blocks = 1;
        c.discriminator.base_channels = 2;
        c.perceptual_extractor = "avgpool-pyramid".into();
        c.check_isolation = true;
        c
    }

    fn pairs() -> MemoryPairs {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| {
            let data = Tensor::<f32>::uniform(&[40 * 36 * 3], 0.0, 1.0, rng).into_vec();
            ImageBuffer::new(40, 36, 3, data).unwrap()
        };
        MemoryPairs((0..3).map(|_| (mk(&mut rng), mk(&mut rng))).collect())
    }

    #[test]
    fn zero_learning_rates_leave_weights_unchanged() {
        let mut cfg = tiny_config();
        cfg.lr_g = 0.0;
        cfg.lr_d = 0.0;
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let before = t.state().weights.clone();
        let rec = t.step(&sample_batch(&cfg, &pairs(), 0).unwrap()).unwrap();
        for (name, w) in before.iter().filter(|(n, _)| !is_buffer(n)) {
            assert_eq!(w, t.state().weights.get(name).unwrap(), "{name}");
        }
        for v in [rec.adv_d, rec.adv_g, rec.fm, rec.pixel, rec.perceptual] {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn identical_state_gives_identical_step() {
        let cfg = tiny_config();
        let state = TrainState::init(&cfg).unwrap();
        let bytes = state.to_weights().to_bytes();
        let batch = sample_batch(&cfg, &pairs(), 0).unwrap();
        let run = || {
            let s = TrainState::from_weights(&ModelWeights::from_bytes(&bytes).unwrap()).unwrap();
            let mut t = Trainer::with_state(cfg.clone(), s).unwrap();
            t.step(&batch).unwrap();
            t.into_state().to_weights().to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn state_round_trips() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.step(&sample_batch(&cfg, &pairs(), 0).unwrap()).unwrap();
        let back = TrainState::from_weights(&t.state().to_weights()).unwrap();
        assert_eq!(&back, t.state());
        assert_eq!(back.step, 1);
    }

    #[test]
    fn mismatched_checkpoint_rejected() {
        let cfg = tiny_config();
        let state = TrainState::init(&cfg).unwrap();
        let mut other = cfg.clone();
        other.discriminator.base_channels = 3;
        let err = Trainer::with_state(other, state).err().unwrap();
        assert!(err.to_string().contains("differ from config"), "{err}");
    }

    #[test]
    fn nan_input_names_the_term() {
        let cfg = tiny_config();
        let mut t = Trainer::new(cfg.clone()).unwrap();
        let names: Vec<String> = t
            .state
            .weights
            .with_prefix("d.scale1.layer1.w")
            .map(|(n, _)| n.to_string())
            .collect();
        t.state.weights.get_mut(&names[0]).unwrap().data_mut()[0] = f32::NAN;
        let err = t
            .step(&sample_batch(&cfg, &pairs(), 0).unwrap())
            .unwrap_err();
        assert!(
            matches!(err, Error::NonFinite { ref term, .. } if term == "adv_d"),
            "{err}"
        );
    }

    #[test]
    fn batches_visit_every_pair_each_epoch() {
        let mut cfg = tiny_config();
        cfg.crop_size = 32;
        cfg.hflip = false;
        let src = MemoryPairs(
            (0..3)
                .map(|i| {
                    let img = ImageBuffer::filled(32, 32, 3, i as f32 / 4.0).unwrap();
                    (img.clone(), img)
                })
                .collect(),
        );
        let mut seen: Vec<f32> = (0..3)
            .map(|s| sample_batch(&cfg, &src, s).unwrap()[0].0.data()[0])
            .collect();
        seen.sort_by(f32::total_cmp);
        assert_eq!(seen, vec![0.0, 0.25, 0.5]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_training(
            &tiny_config(),
            &MemoryPairs::default(),
            dir.path(),
            None,
            |_| {},
        )
        .unwrap_err();
        assert!(err.to_string().contains("empty"), "{err}");
    }
}
