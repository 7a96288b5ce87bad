use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use exposura::checkpoint::write_atomic;
use exposura::gradcheck::{GradRegistry, TOLERANCE};
use exposura::imaging::{
    ev_shift, ev_tag, index_dataset, list_images, load_image, save_image, ImageBuffer,
    EV_SIM_VERSION,
};
use exposura::infer::Corrector;
use exposura::metrics::{
    evaluate_matting, load_manifest, niqe, pi, psnr, ssim, ImageMetrics, MetricReport,
    PristineModel,
};
use exposura::train::{run_training, TrainConfig};
use exposura::{Error, ErrorKind, Result};
use rayon::prelude::*;

use crate::{
    EvalArgs, FitPristineArgs, Format, GradcheckArgs, InferArgs, MattingArgs, SimulateArgs,
    TrainArgs,
};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

/// Creates the parent directory of `path` if needed.
fn prepare(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn images_in(dir: &Path) -> Result<BTreeMap<PathBuf, PathBuf>> {
    let found = list_images(dir)?;
    if found.is_empty() {
        return Err(Error::Dataset(format!(
            "no .png or .imgf images under {}",
            dir.display()
        )));
    }
    Ok(found)
}

/// Collects every failure of a fan-out instead of stopping at the first.
fn gather<T>(results: Vec<Result<T>>, what: &str) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut errs = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errs.push(e),
        }
    }
    match errs.len() {
        0 => Ok(ok),
        1 => Err(errs.pop().unwrap()),
        n => {
            // Numeric beats data beats usage, so the exit code matches the
            // worst failure.
            let kinds: Vec<ErrorKind> = errs.iter().map(Error::kind).collect();
            let msg = format!(
                "{n} {what} failed:\n  {}",
                errs.iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("\n  ")
            );
            Err(if kinds.contains(&ErrorKind::Numeric) {
                Error::Invariant(msg)
            } else if kinds.contains(&ErrorKind::Data) {
                Error::Dataset(msg)
            } else {
                Error::InvalidArgument(msg)
            })
        }
    }
}

fn fmt_losses(r: &exposura::train::LossRecord) -> String {
    format!(
        "adv_d={:.6} adv_g={:.6} fm={:.6} pixel={:.6} perceptual={:.6}",
        r.adv_d, r.adv_g, r.fm, r.pixel, r.perceptual
    )
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let train_dir = a.data_root.join("train");
    let root = if train_dir.is_dir() {
        train_dir
    } else {
        a.data_root.clone()
    };
    let data = index_dataset(&root)?;
    eprintln!("training on {} pairs from {}", data.len(), root.display());
    let every = cfg.checkpoint_every;
    let outcome = run_training(&cfg, &data, &a.out, a.resume.as_deref(), |r| {
        if (r.step + 1) % every == 0 {
            eprintln!("step {} {}", r.step + 1, fmt_losses(r));
        }
    })?;
    if let Some(last) = outcome.records.last() {
        println!("final step {} {}", last.step + 1, fmt_losses(last));
    }
    println!("checkpoint {}", outcome.final_checkpoint.display());
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    let corrector = Corrector::load(&a.checkpoint)?;
    let inputs = images_in(&a.input)?;
    create_dir(&a.out)?;
    let jobs: Vec<(&PathBuf, &PathBuf)> = inputs.iter().collect();
    let results = jobs
        .par_iter()
        .map(|(_, src)| {
            let rel = src.strip_prefix(&a.input).unwrap_or(src);
            let dst = a.out.join(rel);
            prepare(&dst)?;
            save_image(&corrector.correct(&load_image(src)?)?, &dst)
        })
        .collect();
    let n = gather(results, "images")?.len();
    println!("corrected {n} images into {}", a.out.display());
    Ok(())
}

fn read_ma_scores(path: &Path) -> Result<HashMap<String, f64>> {
    let bad = |detail: String| Error::Dataset(format!("{}: {detail}", path.display()));
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let mut out = HashMap::new();
    for row in rdr.deserialize::<(String, f64)>() {
        let (id, ma) = row.map_err(|e| bad(e.to_string()))?;
        if !ma.is_finite() {
            return Err(bad(format!("Ma score for {id} is not finite")));
        }
        if out.insert(id.clone(), ma).is_some() {
            return Err(bad(format!("duplicate id {id}")));
        }
    }
    Ok(out)
}

fn key_id(key: &Path) -> String {
    key.to_string_lossy().replace('\\', "/")
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let preds = images_in(&a.pred)?;
    let gts = images_in(&a.gt)?;
    let mut unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("prediction {} has no reference", key_id(k)))
        .collect();
    unmatched.extend(
        gts.keys()
            .filter(|k| !preds.contains_key(*k))
            .map(|k| format!("reference {} has no prediction", key_id(k))),
    );
    if !unmatched.is_empty() {
        return Err(Error::Dataset(format!(
            "unmatched files:\n  {}",
            unmatched.join("\n  ")
        )));
    }
    let model = a
        .pristine_model
        .as_deref()
        .map(PristineModel::load)
        .transpose()?;
    let ma = a.ma_scores.as_deref().map(read_ma_scores).transpose()?;
    if let Some(ma) = &ma {
        let missing: Vec<String> = preds
            .keys()
            .map(|k| key_id(k))
            .filter(|id| !ma.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Dataset(format!(
                "no Ma score for: {}",
                missing.join(", ")
            )));
        }
    }

    let keys: Vec<&PathBuf> = preds.keys().collect();
    let rows = keys
        .par_iter()
        .map(|k| {
            let id = key_id(k);
            let pred = load_image(&preds[*k])?;
            let gt = load_image(&gts[*k])?;
            let mut m = ImageMetrics {
                id: id.clone(),
                psnr: Some(psnr(&pred, &gt, 1.0)?),
                ssim: Some(ssim(&pred, &gt)?),
                ..Default::default()
            };
            if let Some(model) = &model {
                let q = niqe(&pred, model)?;
                m.niqe = Some(q);
                m.pi = ma.as_ref().map(|s| pi(q, s[&id]));
            }
            Ok(m)
        })
        .collect();
    let mut report = MetricReport::default();
    for m in gather(rows, "images")? {
        report.push(m);
    }
    report
        .meta
        .insert("pred".into(), a.pred.display().to_string());
    report.meta.insert("gt".into(), a.gt.display().to_string());
    report.meta.insert(
        "psnr_peak".into(),
        "1.0; identical images report inf".into(),
    );
    if let Some(p) = &a.pristine_model {
        report
            .meta
            .insert("pristine_model".into(), p.display().to_string());
    }
    if let Some(p) = &a.ma_scores {
        report
            .meta
            .insert("ma_scores".into(), p.display().to_string());
    }
    report.write(&a.out, "metrics")?;
    let text = report.to_text();
    write_atomic(&a.out.join("metrics.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn parse_evs(list: &str) -> Result<Vec<f64>> {
    let mut evs = Vec::new();
    for part in list.split(',') {
        let s = part.trim();
        let ev: f64 = s
            .trim_start_matches('+')
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::InvalidArgument(format!("bad EV {s:?} in --evs")))?;
        if evs.contains(&ev) {
            return Err(Error::InvalidArgument(format!(
                "EV {s} listed twice in --evs"
            )));
        }
        evs.push(ev);
    }
    Ok(evs)
}

pub fn simulate_ev(a: SimulateArgs) -> Result<()> {
    let evs = parse_evs(&a.evs)?;
    let inputs = images_in(&a.input)?;
    create_dir(&a.out)?;
    let ext = match a.format {
        Format::Png => "png",
        Format::Imgf => "imgf",
    };
    let jobs: Vec<(&PathBuf, &PathBuf, f64)> = inputs
        .iter()
        .flat_map(|(k, src)| evs.iter().map(move |&ev| (k, src, ev)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(key, src, ev)| {
            let name = format!(
                "{}_{}.{ext}",
                key.file_name().unwrap().to_string_lossy(),
                ev_tag(ev)
            );
            let dst = a.out.join(key).with_file_name(name);
            prepare(&dst)?;
            save_image(&ev_shift(&load_image(src)?, ev)?, &dst)
        })
        .collect();
    let n = gather(results, "images")?.len();
    let evs_text: Vec<String> = evs.iter().map(|&e| ev_tag(e)).collect();
    write_atomic(
        &a.out.join("ev_sim.txt"),
        format!("{EV_SIM_VERSION}\nevs={}\n", evs_text.join(",")).as_bytes(),
    )?;
    println!("wrote {n} images into {}", a.out.display());
    Ok(())
}

pub fn matting_eval(a: MattingArgs) -> Result<()> {
    let entries = load_manifest(&a.manifest)?;
    let grid = evaluate_matting(&entries, &a.pred, &a.gt)?;
    grid.write(&a.out, "matting")?;
    print!("{}", grid.to_text());
    Ok(())
}

pub fn fit_pristine(a: FitPristineArgs) -> Result<()> {
    let paths: Vec<PathBuf> = images_in(&a.input)?.into_values().collect();
    let images: Vec<ImageBuffer> =
        gather(paths.par_iter().map(|p| load_image(p)).collect(), "images")?;
    let model = PristineModel::fit(&images)?;
    prepare(&a.out)?;
    model.save(&a.out)?;
    println!(
        "fitted pristine model from {} images into {}",
        images.len(),
        a.out.display()
    );
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let reg = if a.negative_control {
        GradRegistry::with_negative_control()
    } else {
        GradRegistry::default()
    };
    let mut names: Vec<String> = if a.cases.is_empty() {
        reg.names().map(str::to_string).collect()
    } else {
        a.cases.clone()
    };
    if a.negative_control && !names.iter().any(|n| n == "negative-control") {
        names.push("negative-control".into());
    }
    let mut rows = vec![[
        "case",
        "coords",
        "max_rel_error",
        "worst",
        "seconds",
        "status",
    ]
    .map(String::from)
    .to_vec()];
    let mut failed = Vec::new();
    for name in &names {
        let r = reg.run(name, a.seed)?;
        let status = if r.passed() { "pass" } else { "FAIL" };
        if !r.passed() {
            failed.push(r.name.clone());
        }
        let row = vec![
            r.name.clone(),
            r.coordinates.to_string(),
            format!("{:.3e}", r.max_rel_error),
            r.worst.clone(),
            format!("{:.2}", r.elapsed.as_secs_f64()),
            status.to_string(),
        ];
        println!("{:<24} {:>7} {:>12} {:>6}", row[0], row[1], row[2], row[5]);
        rows.push(row);
    }
    println!(
        "tolerance {TOLERANCE:e}: {} of {} passed",
        names.len() - failed.len(),
        names.len()
    );
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &rows {
            w.write_record(row)
                .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
        write_atomic(&dir.join("gradcheck.csv"), &bytes)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
