use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exposura::imaging::{ev_shift, load_image, save_image, save_png, ImageBuffer};
use exposura::metrics::psnr;
use exposura::net::GeneratorConfig;

fn exposura(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exposura"))
        .args(args)
        .env_remove("EXPOSURA_THREADS")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gradient(w: usize, h: usize, phase: f32) -> ImageBuffer {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = ((x * 7 + y * 3 + c * 11) as f32 * 0.013 + phase).sin() * 0.4 + 0.5;
                data.push((v * 255.0).round() / 255.0);
            }
        }
    }
    ImageBuffer::new(w, h, 3, data).unwrap()
}

fn write_images(dir: &Path, names: &[&str], w: usize, h: usize) -> Vec<PathBuf> {
    fs::create_dir_all(dir).unwrap();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let path = dir.join(format!("{n}.png"));
            save_png(&gradient(w, h, i as f32), &path).unwrap();
            path
        })
        .collect()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&exposura(&["train", "--bogus"])), 1);
    assert_eq!(code(&exposura(&["no-such-command"])), 1);
    assert_eq!(
        code(&exposura(&[
            "simulate-ev",
            "--input",
            ".",
            "--out",
            "x",
            "--evs",
            "one"
        ])),
        1
    );
    let bad_env = Command::new(env!("CARGO_BIN_EXE_exposura"))
        .args(["gradcheck", "--case", "relu"])
        .env("EXPOSURA_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&bad_env), 1);
    assert_eq!(code(&exposura(&["--help"])), 0);
}

#[test]
fn simulate_ev_names_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let src = write_images(&dir.path().join("in"), &["a", "b"], 24, 16);
    let out = dir.path().join("out");
    let o = exposura(&[
        "simulate-ev",
        "--input",
        p(&dir.path().join("in")),
        "--evs",
        "-1,+1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for n in ["a_N1.png", "a_P1.png", "b_N1.png", "b_P1.png"] {
        assert!(out.join(n).exists(), "{n}");
    }
    let original = load_image(&src[0]).unwrap();
    let brighter = load_image(&out.join("a_P1.png")).unwrap();
    assert!(psnr(&brighter, &original, 1.0).unwrap() < psnr(&original, &original, 1.0).unwrap());
    let expected = ev_shift(&original, 1.0).unwrap();
    assert!(psnr(&brighter, &expected, 1.0).unwrap() > 45.0);

    let raw = dir.path().join("raw");
    let o = exposura(&[
        "simulate-ev",
        "--input",
        p(&dir.path().join("in")),
        "--evs",
        "0",
        "--out",
        p(&raw),
        "--format",
        "imgf",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(load_image(&raw.join("a_0.imgf")).unwrap(), original);
}

#[test]
fn eval_identity_pi_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    let gts = write_images(&gt, &["x", "y", "z"], 192, 96);
    fs::create_dir_all(&pred).unwrap();
    let mut hand = Vec::new();
    for (i, g) in gts.iter().enumerate() {
        let img = load_image(g).unwrap();
        let shifted = ev_shift(&img, 0.25 * (i as f64 + 1.0)).unwrap();
        save_png(&shifted, &pred.join(g.file_name().unwrap())).unwrap();
        hand.push(
            psnr(
                &load_image(&pred.join(g.file_name().unwrap())).unwrap(),
                &img,
                1.0,
            )
            .unwrap(),
        );
    }

    let same = dir.path().join("same");
    let o = exposura(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&same)]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&same.join("metrics.csv"));
    assert_eq!(rows[0], ["id", "psnr", "ssim"]);
    assert!(rows[1..]
        .iter()
        .all(|r| r[1] == "inf" && r[2] == "1.000000"));

    let out = dir.path().join("report");
    let o = exposura(&["eval", "--pred", p(&pred), "--gt", p(&gt), "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&out.join("metrics.csv"));
    let mean_row = rows.last().unwrap();
    assert_eq!(mean_row[0], "mean");
    let want = hand.iter().sum::<f64>() / 3.0;
    assert!((mean_row[1].parse::<f64>().unwrap() - want).abs() < 1e-5);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(json["aggregate"].get("pi").is_none());

    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let ma = dir.path().join("ma.csv");
    fs::write(&ma, "id,ma\nx,5.0\ny,6.0\nz,7.0\n").unwrap();
    let with_pi = dir.path().join("pi");
    let model = fixtures.join("pristine_tiny.expw");
    let o = exposura(&[
        "eval",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--out",
        p(&with_pi),
        "--pristine-model",
        p(&model),
        "--ma-scores",
        p(&ma),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&with_pi.join("metrics.csv"));
    assert_eq!(rows[0], ["id", "psnr", "ssim", "niqe", "pi"]);
    let niqe: f64 = rows[1][3].parse().unwrap();
    let pi: f64 = rows[1][4].parse().unwrap();
    assert!((pi - 0.5 * ((10.0 - 5.0) + niqe)).abs() < 1e-5);

    let o = exposura(&[
        "eval",
        "--pred",
        p(&pred),
        "--gt",
        p(&gt),
        "--out",
        p(&out),
        "--ma-scores",
        p(&ma),
    ]);
    assert_eq!(code(&o), 1, "ma scores without a pristine model");
}

#[test]
fn eval_lists_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    write_images(&dir.path().join("a"), &["one", "two"], 16, 16);
    write_images(&dir.path().join("b"), &["one", "three"], 16, 16);
    let out = dir.path().join("r");
    let o = exposura(&[
        "eval",
        "--pred",
        p(&dir.path().join("a")),
        "--gt",
        p(&dir.path().join("b")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("two") && err.contains("three"), "{err}");
    assert!(!out.join("metrics.csv").exists());
}

fn zero_generator(path: &Path) {
    let cfg = GeneratorConfig {
        encoder_channels: [2, 2, 2, 2, 2],
        n_residual_blocks: 1,
    };
    let mut w = cfg.init_weights::<f32>(3).unwrap();
    let names: Vec<String> = w.names().map(str::to_string).collect();
    for n in names {
        w.get_mut(&n)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
    }
    w.save(path).unwrap();
}

#[test]
fn infer_keeps_size_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("g.expw");
    zero_generator(&ckpt);
    let input = dir.path().join("in");
    fs::create_dir_all(input.join("nested")).unwrap();
    save_png(&gradient(100, 77, 0.0), &input.join("nested/odd.png")).unwrap();
    save_image(&gradient(32, 32, 1.0), &input.join("raw.imgf")).unwrap();
    let run = |out: &Path| {
        let o = exposura(&[
            "infer",
            "--checkpoint",
            p(&ckpt),
            "--input",
            p(&input),
            "--out",
            p(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run(&a);
    run(&b);
    let odd = load_image(&a.join("nested/odd.png")).unwrap();
    assert_eq!((odd.width(), odd.height()), (100, 77));
    assert!(
        odd.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-6),
        "tanh(0) maps to mid-gray"
    );
    assert_eq!(
        fs::read(a.join("raw.imgf")).unwrap(),
        fs::read(b.join("raw.imgf")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("nested/odd.png")).unwrap(),
        fs::read(b.join("nested/odd.png")).unwrap()
    );

    let o = exposura(&[
        "infer",
        "--checkpoint",
        p(&input.join("raw.imgf")),
        "--input",
        p(&input),
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&o), 2, "an image is not a checkpoint");
}

#[test]
fn train_one_step_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data/train");
    write_images(&root.join("target"), &["p", "q"], 40, 40);
    for n in ["p", "q"] {
        let t = load_image(&root.join(format!("target/{n}.png"))).unwrap();
        fs::create_dir_all(root.join("input")).unwrap();
        save_png(
            &ev_shift(&t, -1.0).unwrap(),
            &root.join(format!("input/{n}_N1.png")),
        )
        .unwrap();
    }
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "# tiny\nsteps = 1\ncrop_size = 32\ng_channels = 2,2,2,2,2\ng_residual_blocks = 1\nd_base_channels = 2\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    let args = |steps_cfg: &Path| {
        vec![
            "train".to_string(),
            "--config".into(),
            p(steps_cfg).into(),
            "--data-root".into(),
            p(&dir.path().join("data")).into(),
            "--out".into(),
            p(&out).into(),
        ]
    };
    let o = Command::new(env!("CARGO_BIN_EXE_exposura"))
        .args(args(&cfg))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final step 1 adv_d="));
    assert_eq!(
        fs::read_to_string(out.join("losses.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(out.join("checkpoint_000001.expw").exists());

    let cfg2 = dir.path().join("train2.cfg");
    fs::write(
        &cfg2,
        fs::read_to_string(&cfg)
            .unwrap()
            .replace("steps = 1", "steps = 2"),
    )
    .unwrap();
    let mut resume = args(&cfg2);
    resume.extend([
        "--resume".to_string(),
        p(&out.join("checkpoint_000001.expw")).into(),
    ]);
    let o = Command::new(env!("CARGO_BIN_EXE_exposura"))
        .args(&resume)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(out.join("losses.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    fs::write(&cfg2, "steps = 0\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_exposura"))
        .args(args(&cfg2))
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

fn alpha(path: &Path, v: &[f32]) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    save_png(&ImageBuffer::new(v.len(), 1, 1, v.to_vec()).unwrap(), path).unwrap();
}

#[test]
fn matting_eval_zero_grid_and_holes() {
    let dir = tempfile::tempdir().unwrap();
    alpha(&dir.path().join("gt/ppm/a.png"), &[0.0, 1.0]);
    alpha(&dir.path().join("pred/a.png"), &[0.0, 1.0]);
    let manifest = dir.path().join("m.csv");
    fs::write(
        &manifest,
        "dataset,method,condition,ev,image,pred\nppm,modnet,E,-1,a.png,a.png\nppm,modnet,C,-1,a.png,a.png\nppm,modnet,E,+1,a.png,a.png\nppm,modnet,C,+1,a.png,a.png\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let run = || {
        exposura(&[
            "matting-eval",
            "--pred",
            p(&dir.path().join("pred")),
            "--gt",
            p(&dir.path().join("gt")),
            "--manifest",
            p(&manifest),
            "--out",
            p(&out),
        ])
    };
    let o = run();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&out.join("matting.csv"));
    assert_eq!(
        rows[0],
        [
            "dataset",
            "method",
            "condition",
            "metric",
            "-1",
            "+1",
            "Avg"
        ]
    );
    assert_eq!(rows.len(), 5);
    assert!(rows[1..]
        .iter()
        .all(|r| r[4..].iter().all(|c| c == "0.0000")));
    assert!(out.join("matting.txt").exists() && out.join("matting.json").exists());

    fs::write(
        &manifest,
        "dataset,condition,ev,image,pred\nppm,E,-1,a.png,a.png\nppm,C,+1,a.png,a.png\n",
    )
    .unwrap();
    let o = run();
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("missing ppm//E ev +1") && err.contains("missing ppm//C ev -1"),
        "{err}"
    );
}

#[test]
fn fit_pristine_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/pristine");
    let out = dir.path().join("m/model.expw");
    let o = exposura(&["fit-pristine", "--input", p(&fixtures), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    exposura::metrics::PristineModel::load(&out).unwrap();
}

#[test]
fn gradcheck_reports_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = exposura(&[
        "gradcheck",
        "--case",
        "tanh",
        "--case",
        "add",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(&dir.path().join("gradcheck.csv"));
    assert_eq!(
        rows[0],
        [
            "case",
            "coords",
            "max_rel_error",
            "worst",
            "seconds",
            "status"
        ]
    );
    assert_eq!(rows.len(), 3);
    assert!(rows[1..]
        .iter()
        .all(|r| r[5] == "pass" && r[2].parse::<f64>().unwrap() < 1e-4));

    let o = exposura(&["gradcheck", "--case", "tanh", "--negative-control"]);
    assert_eq!(code(&o), 3);
    assert!(stdout(&o).contains("FAIL"));
    assert_eq!(code(&exposura(&["gradcheck", "--case", "no-such-op"])), 1);
}
