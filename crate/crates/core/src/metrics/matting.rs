//! Grid evaluation of alpha mattes predicted on exposure-manipulated (E)
//! and exposure-corrected (C) portraits.
//!
//! A manifest CSV lists one prediction per row with the columns
//! `dataset`, `method` (optional), `condition` (`E` or `C`), `ev`, `image`
//! and `pred`. `pred` is relative to the prediction root; the ground truth
//! for a row is `<gt_dir>/<dataset>/<image>`.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;
use serde_json::{json, Value};

use super::report::{align, csv_string, pretty};
use super::{matting_error, MATTING_SCALE};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageBuffer, EV_TAGS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Condition {
    /// Matting run on the exposure-manipulated input.
    Manipulated,
    /// Matting run on the corrected input.
    Corrected,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::Manipulated => "E",
            Condition::Corrected => "C",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub dataset: String,
    pub method: String,
    pub condition: Condition,
    pub ev: f64,
    pub image: String,
    pub pred: PathBuf,
}

#[derive(Deserialize)]
struct RawEntry {
    dataset: String,
    #[serde(default)]
    method: String,
    condition: String,
    ev: String,
    image: String,
    pred: String,
}

fn grid_index(ev: f64) -> Option<usize> {
    EV_TAGS.iter().position(|&t| t == ev)
}

/// Parses a manifest; every malformed row is reported, not just the first.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (i, row) in rdr.deserialize::<RawEntry>().enumerate() {
        let line = i + 2;
        let raw = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("row {line}: {e}"));
                continue;
            }
        };
        let condition = match raw.condition.as_str() {
            "E" | "e" => Condition::Manipulated,
            "C" | "c" => Condition::Corrected,
            other => {
                problems.push(format!(
                    "row {line}: condition must be E or C, got {other:?}"
                ));
                continue;
            }
        };
        let ev = match raw.ev.trim_start_matches('+').parse::<f64>() {
            Ok(ev) if grid_index(ev).is_some() => ev,
            _ => {
                problems.push(format!(
                    "row {line}: ev {:?} is not one of {EV_TAGS:?}",
                    raw.ev
                ));
                continue;
            }
        };
        if raw.dataset.is_empty() || raw.image.is_empty() || raw.pred.is_empty() {
            problems.push(format!(
                "row {line}: dataset, image and pred must be non-empty"
            ));
            continue;
        }
        entries.push(ManifestEntry {
            dataset: raw.dataset,
            method: raw.method,
            condition,
            ev,
            image: raw.image,
            pred: PathBuf::from(raw.pred),
        });
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(format!(
            "bad matting manifest:\n  {}",
            problems.join("\n  ")
        )));
    }
    if entries.is_empty() {
        return Err(Error::Dataset("matting manifest has no rows".into()));
    }
    Ok(entries)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub dataset: String,
    pub method: String,
    pub condition: Condition,
    /// Per grid column, mean over the dataset's images, times [`MATTING_SCALE`].
    pub mse: Vec<f64>,
    pub mae: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl GridRow {
    pub fn avg_mse(&self) -> f64 {
        mean(&self.mse)
    }

    pub fn avg_mae(&self) -> f64 {
        mean(&self.mae)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MattingGrid {
    /// Column EVs in ascending order.
    pub evs: Vec<f64>,
    pub rows: Vec<GridRow>,
}

type RowKey = (String, String, Condition);

/// Checks that every (dataset, method, condition) row covers every column
/// for every image of its dataset, with no duplicates. All holes are listed.
fn check_complete(entries: &[ManifestEntry], evs: &[f64]) -> Result<()> {
    let mut images: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut seen: HashMap<(RowKey, usize, &str), usize> = HashMap::new();
    let mut rows: Vec<RowKey> = Vec::new();
    for e in entries {
        let list = images.entry(&e.dataset).or_default();
        if !list.contains(&e.image.as_str()) {
            list.push(&e.image);
        }
        let key = (e.dataset.clone(), e.method.clone(), e.condition);
        if !rows.contains(&key) {
            rows.push(key.clone());
        }
        *seen
            .entry((key, grid_index(e.ev).unwrap(), &e.image))
            .or_default() += 1;
    }
    let mut problems = Vec::new();
    for key in &rows {
        for &ev in evs {
            for image in &images[key.0.as_str()] {
                let label = format!(
                    "{}/{}/{} ev {ev:+} image {image}",
                    key.0,
                    key.1,
                    key.2.label()
                );
                match seen.get(&(key.clone(), grid_index(ev).unwrap(), *image)) {
                    None => problems.push(format!("missing {label}")),
                    Some(&n) if n > 1 => problems.push(format!("{n} entries for {label}")),
                    _ => {}
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Dataset(format!(
            "matting manifest has holes:\n  {}",
            problems.join("\n  ")
        )))
    }
}

/// Loads every prediction and ground truth and reduces them to the grid.
/// Missing or unreadable files are collected and reported together.
pub fn evaluate_matting(
    entries: &[ManifestEntry],
    pred_root: &Path,
    gt_dir: &Path,
) -> Result<MattingGrid> {
    let mut evs: Vec<f64> = EV_TAGS
        .iter()
        .copied()
        .filter(|&t| entries.iter().any(|e| e.ev == t))
        .collect();
    evs.sort_by(f64::total_cmp);
    check_complete(entries, &evs)?;

    let mut gt_paths: Vec<PathBuf> = entries
        .iter()
        .map(|e| gt_dir.join(&e.dataset).join(&e.image))
        .collect();
    gt_paths.sort();
    gt_paths.dedup();
    let loaded: Vec<Result<ImageBuffer>> = gt_paths.par_iter().map(|p| load_image(p)).collect();
    let mut problems = Vec::new();
    let mut gts: HashMap<&Path, ImageBuffer> = HashMap::new();
    for (p, r) in gt_paths.iter().zip(loaded) {
        match r {
            Ok(img) => {
                gts.insert(p.as_path(), img);
            }
            Err(e) => problems.push(e.to_string()),
        }
    }

    // `None` marks entries whose ground truth already failed to load.
    let scores: Vec<Result<Option<(f64, f64)>>> = entries
        .par_iter()
        .map(|e| {
            let Some(gt) = gts.get(gt_dir.join(&e.dataset).join(&e.image).as_path()) else {
                return Ok(None);
            };
            let pred = load_image(&pred_root.join(&e.pred))?;
            matting_error(&pred, gt)
                .map(Some)
                .map_err(|err| Error::Dataset(format!("{}: {err}", e.pred.display())))
        })
        .collect();
    problems.extend(
        scores
            .iter()
            .filter_map(|s| s.as_ref().err().map(|e| e.to_string())),
    );
    if !problems.is_empty() {
        return Err(Error::Dataset(format!(
            "matting evaluation failed:\n  {}",
            problems.join("\n  ")
        )));
    }

    let mut rows: Vec<GridRow> = Vec::new();
    let mut sums: Vec<Vec<(f64, f64, usize)>> = Vec::new();
    for (e, s) in entries.iter().zip(scores) {
        let (mse, mae) = s?.expect("all ground truths loaded");
        let pos = match rows.iter().position(|r| {
            r.dataset == e.dataset && r.method == e.method && r.condition == e.condition
        }) {
            Some(p) => p,
            None => {
                rows.push(GridRow {
                    dataset: e.dataset.clone(),
                    method: e.method.clone(),
                    condition: e.condition,
                    mse: Vec::new(),
                    mae: Vec::new(),
                });
                sums.push(vec![(0.0, 0.0, 0); evs.len()]);
                rows.len() - 1
            }
        };
        let col = evs.iter().position(|&t| t == e.ev).unwrap();
        let cell = &mut sums[pos][col];
        cell.0 += mse;
        cell.1 += mae;
        cell.2 += 1;
    }
    for (row, cells) in rows.iter_mut().zip(&sums) {
        row.mse = cells.iter().map(|c| c.0 / c.2 as f64).collect();
        row.mae = cells.iter().map(|c| c.1 / c.2 as f64).collect();
    }
    // Stable: keeps first-appearance order of (dataset, method), E before C.
    let order: Vec<(String, String)> = rows.iter().fold(Vec::new(), |mut acc, r| {
        let k = (r.dataset.clone(), r.method.clone());
        if !acc.contains(&k) {
            acc.push(k);
        }
        acc
    });
    rows.sort_by_key(|r| {
        (
            order
                .iter()
                .position(|k| k.0 == r.dataset && k.1 == r.method),
            r.condition,
        )
    });
    Ok(MattingGrid { evs, rows })
}

fn ev_label(ev: f64) -> String {
    if ev == 0.0 {
        "0".into()
    } else {
        format!("{ev:+}")
    }
}

impl MattingGrid {
    fn table(&self) -> Vec<Vec<String>> {
        let mut header: Vec<String> = ["dataset", "method", "condition", "metric"]
            .map(String::from)
            .to_vec();
        header.extend(self.evs.iter().map(|&e| ev_label(e)));
        header.push("Avg".into());
        let mut out = vec![header];
        for r in &self.rows {
            for (metric, vals, avg) in [("MSE", &r.mse, r.avg_mse()), ("MAE", &r.mae, r.avg_mae())]
            {
                let mut row = vec![
                    r.dataset.clone(),
                    r.method.clone(),
                    r.condition.label().into(),
                    metric.into(),
                ];
                row.extend(vals.iter().chain([&avg]).map(|v| format!("{v:.4}")));
                out.push(row);
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.table())
    }

    pub fn to_text(&self) -> String {
        align(&self.table())
    }

    pub fn to_json(&self) -> Value {
        let cells = |vals: &[f64], avg: f64| {
            let mut o = serde_json::Map::new();
            for (&ev, &v) in self.evs.iter().zip(vals) {
                o.insert(ev_label(ev), json!(v));
            }
            o.insert("Avg".into(), json!(avg));
            Value::Object(o)
        };
        json!({
            "meta": {
                "scale": MATTING_SCALE,
                "convention": "whole-image mean squared / absolute alpha error, multiplied by scale; \
                               each cell averages the dataset's images, Avg averages the row's cells",
            },
            "evs": self.evs,
            "rows": self.rows.iter().map(|r| json!({
                "dataset": r.dataset,
                "method": r.method,
                "condition": r.condition.label(),
                "mse": cells(&r.mse, r.avg_mse()),
                "mae": cells(&r.mae, r.avg_mae()),
            })).collect::<Vec<_>>(),
        })
    }

    /// Writes `<stem>.csv`, `<stem>.txt` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_atomic(&dir.join(format!("{stem}.txt")), self.to_text().as_bytes())?;
        write_atomic(
            &dir.join(format!("{stem}.json")),
            pretty(&self.to_json())?.as_bytes(),
        )
    }
}
