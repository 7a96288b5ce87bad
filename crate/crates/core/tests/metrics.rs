use std::path::PathBuf;
use std::sync::OnceLock;

use exposura::imaging::{load_image, ImageBuffer};
use exposura::metrics::{niqe, psnr, ssim, PristineModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fixture_dir(sub: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(sub)
}

fn fixtures(sub: &str) -> Vec<(String, ImageBuffer)> {
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

fn model() -> &'static PristineModel {
    static MODEL: OnceLock<PristineModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let imgs: Vec<ImageBuffer> = fixtures("pristine").into_iter().map(|(_, i)| i).collect();
        PristineModel::fit(&imgs).unwrap()
    })
}

fn add_noise(img: &ImageBuffer, sigma: f64, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    let data = img
        .data()
        .iter()
        .map(|&v| v + n.sample(&mut rng) as f32)
        .collect();
    ImageBuffer::new(img.width(), img.height(), img.channels(), data).unwrap()
}

#[test]
fn niqe_non_decreasing_over_noise_levels() {
    for (name, img) in fixtures("photos") {
        let scores: Vec<f64> = [0.02, 0.05, 0.1]
            .iter()
            .map(|&s| niqe(&add_noise(&img, s, 3), model()).unwrap())
            .collect();
        assert!(
            scores.windows(2).all(|w| w[0] <= w[1]),
            "{name}: {scores:?}"
        );
    }
}

#[test]
fn strong_noise_scores_worse_than_clean() {
    for (name, img) in fixtures("photos") {
        let clean = niqe(&img, model()).unwrap();
        let noisy = niqe(&add_noise(&img, 0.1, 9), model()).unwrap();
        assert!(noisy > clean, "{name}: clean {clean} noisy {noisy}");
    }
}

#[test]
fn niqe_nearly_flip_invariant() {
    for (name, img) in fixtures("photos") {
        let a = niqe(&img, model()).unwrap();
        let b = niqe(&img.flip_horizontal(), model()).unwrap();
        assert!((a - b).abs() <= 0.05 * a, "{name}: {a} vs flipped {b}");
    }
}

#[test]
fn pristine_members_score_below_mean_plus_std() {
    let scores: Vec<f64> = fixtures("pristine")
        .iter()
        .map(|(_, img)| niqe(img, model()).unwrap())
        .collect();
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (name, img) = &fixtures("pristine")[0];
    let own = niqe(img, model()).unwrap();
    assert!(own < mean + std, "{name}: {own} vs {mean} + {std}");
}

#[test]
fn committed_model_matches_a_fresh_fit() {
    let committed = PristineModel::load(&fixture_dir("pristine_tiny.expw")).unwrap();
    let fresh = model();
    assert_eq!(committed.patch_size, fresh.patch_size);
    let scale = fresh.mean.amax();
    assert!((committed.mean.clone() - &fresh.mean).amax() <= 1e-6 * scale);
}

#[test]
fn psnr_decreases_with_noise() {
    let (_, img) = &fixtures("photos")[0];
    let p: Vec<f64> = [0.01, 0.03, 0.1]
        .iter()
        .map(|&s| psnr(img, &add_noise(img, s, 1), 1.0).unwrap())
        .collect();
    assert!(p[0] > p[1] && p[1] > p[2], "{p:?}");
}

#[test]
fn ssim_symmetric_and_bounded() {
    let (_, img) = &fixtures("photos")[0];
    let noisy = add_noise(img, 0.05, 2);
    let ab = ssim(img, &noisy).unwrap();
    let ba = ssim(&noisy, img).unwrap();
    assert!((ab - ba).abs() < 1e-12);
    assert!(ab < 1.0);
    assert!((ssim(img, img).unwrap() - 1.0).abs() < 1e-12);
}
