//! On-disk layout of a dataset: `manifest.jsonl` plus PNG rasters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{constant_map, ground_truth_map, BinaryMap, FakenessMap, Image};
use crate::locator::hex_digest;
use crate::texturegen::{Family, Label, Provenance, SampleKind, SamplePair};
use crate::training::split_indices;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub family: Option<Family>,
    pub input: String,
    pub gt: String,
    pub mask: Option<String>,
    pub reference: Option<String>,
    pub input_sha256: String,
    pub gt_sha256: String,
    pub provenance: Provenance,
}

fn write_png(dir: &Path, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<String> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write(&path)?;
    Ok(hex_digest(&fs::read(&path)?))
}

/// Writes every sample and a manifest with a stratified 80/10/10 split keyed by `split_seed`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[SamplePair], split_seed: u64) -> Result<Vec<ManifestEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let flags: Vec<bool> = samples.iter().map(|s| s.label.is_fake()).collect();
    let mut split_of = vec![Split::Train; samples.len()];
    for (split, idx) in Split::ALL.into_iter().zip(split_indices(&flags, split_seed)) {
        for i in idx {
            split_of[i] = split;
        }
    }
    let mut entries = Vec::with_capacity(samples.len());
    for (s, split) in samples.iter().zip(split_of) {
        let input = format!("images/{}.png", s.id);
        let gt = format!("gt/{}.png", s.id);
        let input_sha256 = write_png(dir, &input, |p| s.input.save_png(p))?;
        let gt_sha256 = write_png(dir, &gt, |p| s.gt.save_png(p))?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", s.id);
                write_png(dir, &rel, |p| m.save_png(p))?;
                Some(rel)
            }
            None => None,
        };
        let reference = match &s.reference {
            Some(r) => {
                let rel = format!("reference/{}.png", s.id);
                write_png(dir, &rel, |p| r.save_png(p))?;
                Some(rel)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id.clone(),
            label: s.label,
            split,
            family: s.family(),
            input,
            gt,
            mask,
            reference,
            input_sha256,
            gt_sha256,
            provenance: s.provenance.clone(),
        });
    }
    let mut f = fs::File::create(dir.join(MANIFEST_FILE))?;
    for e in &entries {
        writeln!(f, "{}", serde_json::to_string(e)?)?;
    }
    Ok(entries)
}

/// Accepts a manifest file or the directory containing one.
pub fn manifest_path(path: impl AsRef<Path>) -> PathBuf {
    let p = path.as_ref();
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = manifest_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("manifest line {}: {e}", i + 1))))
        .collect()
}

pub fn manifest_digest(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex_digest(&fs::read(manifest_path(path))?))
}

/// Loads samples, optionally restricted to some splits. Ground truth of
/// partial fakes is recomputed from the stored real partner.
pub fn load_dataset(path: impl AsRef<Path>, splits: Option<&[Split]>) -> Result<Vec<(Split, SamplePair)>> {
    let manifest = manifest_path(path);
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for e in read_manifest(&manifest)? {
        if splits.is_some_and(|s| !s.contains(&e.split)) {
            continue;
        }
        let input = Image::load(root.join(&e.input))?;
        let (h, w) = input.dims();
        let mask = e.mask.as_ref().map(|m| BinaryMap::load_png(root.join(m))).transpose()?;
        let reference = e.reference.as_ref().map(|r| Image::load(root.join(r))).transpose()?;
        let gt = match (e.provenance.kind, &reference) {
            (SampleKind::Real, _) => FakenessMap::zeros(h, w),
            (SampleKind::Entire, _) => constant_map(h, w, 1)?,
            (SampleKind::Partial, Some(r)) => ground_truth_map(r, &input)?,
            (SampleKind::Partial, None) => FakenessMap::load_png(root.join(&e.gt))?,
        };
        out.push((
            e.split,
            SamplePair {
                id: e.id,
                input,
                gt,
                label: e.label,
                mask,
                provenance: e.provenance,
                reference,
            },
        ));
    }
    Ok(out)
}

/// Per-family sample counts, reals under `"real"`.
pub fn family_counts(entries: &[ManifestEntry]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for e in entries {
        let key = e.family.map_or_else(|| "real".to_string(), |f| f.name().to_string());
        *out.entry(key).or_insert(0) += 1;
    }
    out
}
