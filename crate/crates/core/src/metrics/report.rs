use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

/// Metric values for one image; absent metrics were not computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub niqe: Option<f64>,
    pub pi: Option<f64>,
    pub matting_mse: Option<f64>,
    pub matting_mae: Option<f64>,
}

type Column = (&'static str, fn(&ImageMetrics) -> Option<f64>);

const COLUMNS: [Column; 6] = [
    ("psnr", |m| m.psnr),
    ("ssim", |m| m.ssim),
    ("niqe", |m| m.niqe),
    ("pi", |m| m.pi),
    ("matting_mse", |m| m.matting_mse),
    ("matting_mae", |m| m.matting_mae),
];

/// Per-image rows plus their column means. Columns that no row carries
/// are left out of every output format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub records: Vec<ImageMetrics>,
    /// Free-form provenance written into the JSON output.
    pub meta: BTreeMap<String, String>,
}

fn fmt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "inf".into(),
        Some(x) => format!("{x:.6}"),
    }
}

fn json_num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(if v > 0.0 { "inf" } else { "nan" })
    }
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.records.push(m);
    }

    fn columns(&self) -> Vec<Column> {
        COLUMNS
            .into_iter()
            .filter(|(_, get)| self.records.iter().any(|r| get(r).is_some()))
            .collect()
    }

    /// Arithmetic mean of each column over the rows that carry it.
    pub fn aggregate(&self) -> ImageMetrics {
        let mean = |get: fn(&ImageMetrics) -> Option<f64>| {
            let vals: Vec<f64> = self.records.iter().filter_map(get).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        ImageMetrics {
            id: "mean".into(),
            psnr: mean(COLUMNS[0].1),
            ssim: mean(COLUMNS[1].1),
            niqe: mean(COLUMNS[2].1),
            pi: mean(COLUMNS[3].1),
            matting_mse: mean(COLUMNS[4].1),
            matting_mae: mean(COLUMNS[5].1),
        }
    }

    fn rows(&self) -> Vec<Vec<String>> {
        let cols = self.columns();
        let mut rows = vec![std::iter::once("id".to_string())
            .chain(cols.iter().map(|(n, _)| n.to_string()))
            .collect::<Vec<_>>()];
        let agg = self.aggregate();
        for r in self.records.iter().chain(std::iter::once(&agg)) {
            rows.push(
                std::iter::once(r.id.clone())
                    .chain(cols.iter().map(|(_, get)| fmt(get(r))))
                    .collect(),
            );
        }
        rows
    }

    /// One row per image and a final `mean` row.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.rows())
    }

    pub fn to_json(&self) -> Value {
        let cols = self.columns();
        let obj = |m: &ImageMetrics| {
            let mut o = Map::new();
            o.insert("id".into(), json!(m.id));
            for (name, get) in &cols {
                if let Some(v) = get(m) {
                    o.insert(name.to_string(), json_num(v));
                }
            }
            Value::Object(o)
        };
        json!({
            "meta": self.meta,
            "images": self.records.iter().map(obj).collect::<Vec<_>>(),
            "aggregate": obj(&self.aggregate()),
        })
    }

    /// Column-aligned table for terminals.
    pub fn to_text(&self) -> String {
        align(&self.rows())
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv()?.as_bytes())?;
        write_atomic(
            &dir.join(format!("{stem}.json")),
            pretty(&self.to_json())?.as_bytes(),
        )
    }
}

pub(super) fn pretty(v: &Value) -> Result<String> {
    serde_json::to_string_pretty(v)
        .map_err(|e| Error::InvalidArgument(format!("json encoding: {e}")))
}

pub(super) fn csv_string(rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(row)
            .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv encoding: {e}")))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// First column left-aligned, the rest right-aligned.
pub(super) fn align(rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
