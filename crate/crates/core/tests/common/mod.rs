#![allow(dead_code)]

use std::path::PathBuf;

use exposura::imaging::{ev_shift, load_image, ImageBuffer};

pub fn fixture_dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(sub)
}

pub fn fixtures(sub: &str) -> Vec<(String, ImageBuffer)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(fixture_dir(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            (
                p.file_stem().unwrap().to_string_lossy().into_owned(),
                load_image(&p).unwrap(),
            )
        })
        .collect()
}

/// Eight well-exposed 64x64 targets cut from the photo fixtures.
pub fn toy_targets() -> Vec<ImageBuffer> {
    let photos = fixtures("photos");
    let spots = [
        (0, 60, 60),
        (1, 100, 40),
        (2, 20, 150),
        (3, 112, 112),
        (4, 40, 40),
        (0, 180, 120),
        (2, 150, 30),
        (4, 170, 190),
    ];
    spots
        .iter()
        .map(|&(i, x, y)| photos[i].1.to_rgb().crop(x, y, 64, 64).unwrap())
        .collect()
}

/// The overfit set: targets 0..4 darkened by one stop, 4..8 brightened,
/// plus EV-0 pairs (input == target) for the first two of each group.
pub struct ToySet {
    pub shifted: Vec<(ImageBuffer, ImageBuffer)>,
    pub identity: Vec<(ImageBuffer, ImageBuffer)>,
}

pub fn toy_set() -> ToySet {
    let targets = toy_targets();
    let shifted = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            (
                ev_shift(t, if i < 4 { -1.0 } else { 1.0 }).unwrap(),
                t.clone(),
            )
        })
        .collect();
    let identity = [0, 1, 4, 5]
        .iter()
        .map(|&i| (targets[i].clone(), targets[i].clone()))
        .collect();
    ToySet { shifted, identity }
}

use exposura::infer::Corrector;
use exposura::train::{evaluate_pairs, sample_batch, MemoryPairs, TrainConfig, Trainer};

/// Default configuration apart from the crop, which matches the 64x64 toy
/// images.
pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        crop_size: 64,
        ..TrainConfig::default()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone)]
pub struct OverfitOutcome {
    pub l1_start: f64,
    pub l1_end: f64,
    pub psnr_start: f64,
    pub psnr_end: f64,
    /// Final mean L1 on the EV-0 pairs and on the shifted pairs.
    pub identity_l1: f64,
    pub shifted_l1: f64,
    pub all_finite: bool,
    pub seconds: f64,
}

/// Trains on the toy set (shifted and EV-0 pairs) and scores the generator
/// on the shifted pairs before and after.
pub fn run_overfit(steps: u64) -> OverfitOutcome {
    let set = toy_set();
    let cfg = TrainConfig {
        steps,
        ..overfit_config()
    };
    let mut pairs = set.shifted.clone();
    pairs.extend(set.identity.iter().cloned());
    let source = MemoryPairs(pairs);
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let score = |t: &Trainer, p: &[(ImageBuffer, ImageBuffer)]| {
        let c = Corrector::new(&t.state().weights).unwrap();
        evaluate_pairs(&c, p).unwrap()
    };
    let start = score(&trainer, &set.shifted);
    let clock = std::time::Instant::now();
    let mut all_finite = true;
    for step in 0..steps {
        let rec = trainer
            .step(&sample_batch(&cfg, &source, step).unwrap())
            .unwrap();
        all_finite &= [rec.adv_d, rec.adv_g, rec.fm, rec.pixel, rec.perceptual]
            .iter()
            .all(|v| v.is_finite());
        if step % 100 == 0 {
            eprintln!("step {step}: {rec:?}");
        }
    }
    let seconds = clock.elapsed().as_secs_f64();
    let end = score(&trainer, &set.shifted);
    let ident = score(&trainer, &set.identity);
    OverfitOutcome {
        l1_start: mean(start.iter().map(|s| s.l1)),
        l1_end: mean(end.iter().map(|s| s.l1)),
        psnr_start: mean(start.iter().map(|s| s.psnr)),
        psnr_end: mean(end.iter().map(|s| s.psnr)),
        identity_l1: mean(ident.iter().map(|s| s.l1)),
        shifted_l1: mean(end.iter().map(|s| s.l1)),
        all_finite,
        seconds,
    }
}
