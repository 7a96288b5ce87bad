//! Paired dataset layout.
//!
//! A dataset root holds `input/` and `target/` trees. Input file stems carry
//! an exposure tag, `<stem>_P<ev>` (over), `<stem>_N<ev>` (under) or
//! `<stem>_0` (well exposed); the matching target is `<stem>` at the same
//! relative location under `target/`. Split datasets nest this layout under
//! `train/`, `val/` and `test/`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Exposure offsets a tag may carry.
pub const EV_TAGS: [f64; 9] = [-2.5, -2.0, -1.5, -1.0, 0.0, 1.0, 1.5, 2.0, 2.5];
const EXTENSIONS: [&str; 2] = ["png", "imgf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub input: PathBuf,
    pub target: PathBuf,
    pub ev: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub records: Vec<DatasetRecord>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Indexes `root/<split>/{input,target}`.
    pub fn split(root: &Path, split: Split) -> Result<Self> {
        index_dataset(&root.join(split.dir_name()))
    }
}

/// Splits `stem` into its base name and exposure offset. Returns `None` when
/// the stem carries no tag in the expected grammar.
pub fn parse_ev_tag(stem: &str) -> Option<(&str, f64)> {
    let (base, tag) = stem.rsplit_once('_')?;
    if base.is_empty() {
        return None;
    }
    if tag == "0" {
        return Some((base, 0.0));
    }
    let sign = match tag.as_bytes().first()? {
        b'P' => 1.0,
        b'N' => -1.0,
        _ => return None,
    };
    let digits = &tag[1..];
    let (int, frac) = digits.split_once('.').unwrap_or((digits, "0"));
    let numeric = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !numeric(int) || !numeric(frac) {
        return None;
    }
    Some((base, sign * digits.parse::<f64>().ok()?))
}

/// The tag [`parse_ev_tag`] reads back as `ev`: `P1.5`, `N2`, `0`.
pub fn ev_tag(ev: f64) -> String {
    if ev == 0.0 {
        return "0".into();
    }
    format!("{}{}", if ev > 0.0 { 'P' } else { 'N' }, ev.abs())
}

/// Image files (`.png`, `.imgf`) anywhere under `dir`, keyed by path
/// relative to `dir` without extension. Two files sharing a key are an
/// error.
pub fn list_images(dir: &Path) -> Result<BTreeMap<PathBuf, PathBuf>> {
    fn walk(
        dir: &Path,
        rel: &Path,
        out: &mut BTreeMap<PathBuf, PathBuf>,
        dups: &mut Vec<String>,
    ) -> Result<()> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let path = entry.path();
            let name = rel.join(entry.file_name());
            if path.is_dir() {
                walk(&path, &name, out, dups)?;
                continue;
            }
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let key = name.with_extension("");
            if let Some(prev) = out.insert(key, path.clone()) {
                dups.push(format!("{} and {}", prev.display(), path.display()));
            }
        }
        Ok(())
    }
    if !dir.is_dir() {
        return Err(Error::Dataset(format!(
            "missing directory {}",
            dir.display()
        )));
    }
    let mut out = BTreeMap::new();
    let mut dups = Vec::new();
    walk(dir, Path::new(""), &mut out, &mut dups)?;
    if !dups.is_empty() {
        dups.sort();
        return Err(Error::Dataset(format!(
            "files share a stem: {}",
            dups.join("; ")
        )));
    }
    Ok(out)
}

/// Pairs every tagged input with its target. Records are ordered by input
/// path; every orphan or malformed name is reported in one error.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex> {
    let inputs = list_images(&root.join("input"))?;
    let targets = list_images(&root.join("target"))?;
    if inputs.is_empty() && targets.is_empty() {
        return Err(Error::Dataset(format!(
            "no images under {}",
            root.display()
        )));
    }
    let mut problems = Vec::new();
    let mut used = vec![false; targets.len()];
    let target_keys: Vec<&PathBuf> = targets.keys().collect();
    let mut records = Vec::new();
    for (key, input) in &inputs {
        let stem = key.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((base, ev)) = parse_ev_tag(stem) else {
            problems.push(format!(
                "input {} has no _P<ev>/_N<ev>/_0 tag",
                input.display()
            ));
            continue;
        };
        if !EV_TAGS.contains(&ev) {
            problems.push(format!(
                "input {} has unsupported EV {ev:+}",
                input.display()
            ));
            continue;
        }
        let target_key = key.with_file_name(base);
        match target_keys.binary_search(&&target_key) {
            Ok(i) => {
                used[i] = true;
                records.push(DatasetRecord {
                    input: input.clone(),
                    target: targets[&target_key].clone(),
                    ev,
                });
            }
            Err(_) => problems.push(format!(
                "orphan input {} (no target {base})",
                input.display()
            )),
        }
    }
    for (i, key) in target_keys.iter().enumerate() {
        if !used[i] {
            problems.push(format!("orphan target {}", targets[*key].display()));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Dataset(problems.join("\n")));
    }
    Ok(DatasetIndex { records })
}
