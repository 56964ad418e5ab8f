//! Image/mask pairs on disk.
//!
//! * `flat`: `<id>.pgm` with `<id>_mask.pgm` (and optionally `<id>_fov.pgm`)
//!   in one directory.
//! * `drive`: `images/<n>_*.pgm` paired with `1st_manual/<n>_*.pgm` by the
//!   numeric prefix `n`; `mask/<n>_*.pgm` is read as the field of view.
//! * a `manifest.json` array of `{id, image_path, mask_path}` (paths relative
//!   to the manifest) is accepted by [`load_manifest`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mcunet_core::data::{ImageRecord, Patch, PatchSet};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TriageError};
use crate::{pgm, tns};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Drive,
    Flat,
}

impl FromStr for Layout {
    type Err = TriageError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drive" => Ok(Layout::Drive),
            "flat" => Ok(Layout::Flat),
            other => Err(TriageError::config("layout", format!("unknown layout {other:?} (drive|flat)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

pub fn load_dataset(root: &Path, layout: Layout) -> Result<Vec<ImageRecord>> {
    let entries = match layout {
        Layout::Flat => flat_entries(root)?,
        Layout::Drive => drive_entries(root)?,
    };
    entries.into_iter().map(|(e, fov)| load_pair(&e, fov.as_deref())).collect()
}

pub fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| TriageError::io(path, e))?;
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| TriageError::data(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(TriageError::data(format!("duplicate id {:?} in {}", w[0].id, path.display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let resolved =
                ManifestEntry { id: e.id, image_path: base.join(e.image_path), mask_path: base.join(e.mask_path) };
            load_pair(&resolved, None)
        })
        .collect()
}

/// Load a dataset directory, picking the layout from its contents: a
/// `manifest.json`, an `images/` subdirectory (drive) or flat files.
pub fn load_auto(root: &Path) -> Result<Vec<ImageRecord>> {
    if root.join("manifest.json").is_file() {
        load_manifest(&root.join("manifest.json"))
    } else if root.join("images").is_dir() {
        load_dataset(root, Layout::Drive)
    } else {
        load_dataset(root, Layout::Flat)
    }
}

/// Write records in the flat layout plus a manifest; returns the manifest.
pub fn save_flat(root: &Path, records: &[ImageRecord]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(root).map_err(|e| TriageError::io(root, e))?;
    let mut manifest = Vec::with_capacity(records.len());
    for r in records {
        let entry = ManifestEntry {
            id: r.id.clone(),
            image_path: format!("{}.pgm", r.id).into(),
            mask_path: format!("{}_mask.pgm", r.id).into(),
        };
        pgm::write(&root.join(&entry.image_path), &r.image)?;
        pgm::write(&root.join(&entry.mask_path), &r.mask)?;
        manifest.push(entry);
    }
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("plain data");
    std::fs::write(&path, json).map_err(|e| TriageError::io(&path, e))?;
    Ok(manifest)
}

fn load_pair(e: &ManifestEntry, fov: Option<&Path>) -> Result<ImageRecord> {
    let image = pgm::read(&e.image_path)?;
    let mask = pgm::read(&e.mask_path)?;
    let (h, w) = (image.dim(0), image.dim(1));
    if mask.shape() != image.shape() {
        return Err(TriageError::data(format!("{}: mask is {:?}, image is {:?}", e.id, mask.shape(), image.shape())));
    }
    let fov = fov.map(pgm::read).transpose()?;
    let image = image.reshape(&[1, h, w])?;
    ImageRecord::new(e.id.clone(), image, mask, fov).map_err(|err| TriageError::data(format!("{}: {err}", e.id)))
}

fn pgm_files(dir: &Path) -> Result<Vec<String>> {
    let read = std::fs::read_dir(dir).map_err(|e| TriageError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| TriageError::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".pgm") && entry.path().is_file() {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

type Entry = (ManifestEntry, Option<PathBuf>);

fn flat_entries(root: &Path) -> Result<Vec<Entry>> {
    let names = pgm_files(root)?;
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    let mut fovs = BTreeMap::new();
    for name in &names {
        let stem = name.trim_end_matches(".pgm");
        if let Some(id) = stem.strip_suffix("_mask") {
            masks.insert(id.to_string(), root.join(name));
        } else if let Some(id) = stem.strip_suffix("_fov") {
            fovs.insert(id.to_string(), root.join(name));
        } else {
            images.insert(stem.to_string(), root.join(name));
        }
    }
    if let Some(id) = masks.keys().find(|id| !images.contains_key(*id)) {
        return Err(TriageError::data(format!("{id}: mask without image")));
    }
    images
        .into_iter()
        .map(|(id, image_path)| {
            let mask_path = masks.remove(&id).ok_or_else(|| TriageError::data(format!("{id}: image without mask")))?;
            let fov = fovs.remove(&id);
            Ok((ManifestEntry { id, image_path, mask_path }, fov))
        })
        .collect()
}

/// Numeric prefix before the first `_` (DRIVE's `21_training`, `21_manual1`).
fn index_prefix(name: &str) -> Option<String> {
    let prefix = name.split('_').next()?;
    (!prefix.is_empty() && prefix.bytes().all(|b| b.is_ascii_digit())).then(|| prefix.to_string())
}

fn drive_entries(root: &Path) -> Result<Vec<Entry>> {
    let by_prefix = |dir: &str, required: bool| -> Result<BTreeMap<String, PathBuf>> {
        let path = root.join(dir);
        if !path.is_dir() {
            if required {
                return Err(TriageError::data(format!("{}: missing directory", path.display())));
            }
            return Ok(BTreeMap::new());
        }
        let mut out = BTreeMap::new();
        for name in pgm_files(&path)? {
            let id = index_prefix(&name)
                .ok_or_else(|| TriageError::data(format!("{dir}/{name}: no numeric index prefix")))?;
            if out.insert(id.clone(), path.join(&name)).is_some() {
                return Err(TriageError::data(format!("{dir}: two files with index {id}")));
            }
        }
        Ok(out)
    };
    let images = by_prefix("images", true)?;
    let mut masks = by_prefix("1st_manual", true)?;
    let mut fovs = by_prefix("mask", false)?;
    if let Some(id) = masks.keys().find(|id| !images.contains_key(*id)) {
        return Err(TriageError::data(format!("{id}: manual segmentation without image")));
    }
    // Numeric order, not lexicographic, so 2 sorts before 10.
    let mut ids: Vec<String> = images.keys().cloned().collect();
    ids.sort_by_key(|id| (id.parse::<u64>().unwrap_or(u64::MAX), id.clone()));
    ids.into_iter()
        .map(|id| {
            let image_path = images[&id].clone();
            let mask_path = masks
                .remove(&id)
                .ok_or_else(|| TriageError::data(format!("{id}: image without manual segmentation")))?;
            let fov = fovs.remove(&id);
            Ok((ManifestEntry { id, image_path, mask_path }, fov))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub record: usize,
    pub y: usize,
    pub x: usize,
    pub image_file: String,
    pub mask_file: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchManifest {
    pub size: usize,
    pub patches: Vec<PatchEntry>,
}

pub const PATCH_MANIFEST: &str = "patches.json";

/// A patch set as `<i>.image.tns` / `<i>.mask.tns` pairs plus `patches.json`.
pub fn save_patches(dir: &Path, set: &PatchSet) -> Result<PatchManifest> {
    std::fs::create_dir_all(dir).map_err(|e| TriageError::io(dir, e))?;
    let mut patches = Vec::with_capacity(set.len());
    for (i, p) in set.patches.iter().enumerate() {
        let entry = PatchEntry {
            record: p.record,
            y: p.y,
            x: p.x,
            image_file: format!("{i:05}.image.tns"),
            mask_file: format!("{i:05}.mask.tns"),
        };
        tns::write(&dir.join(&entry.image_file), &p.image)?;
        tns::write(&dir.join(&entry.mask_file), &p.mask)?;
        patches.push(entry);
    }
    let manifest = PatchManifest { size: set.size, patches };
    let path = dir.join(PATCH_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("plain data"))
        .map_err(|e| TriageError::io(&path, e))?;
    Ok(manifest)
}

pub fn load_patches(dir: &Path) -> Result<PatchSet> {
    let path = dir.join(PATCH_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| TriageError::io(&path, e))?;
    let manifest: PatchManifest =
        serde_json::from_str(&text).map_err(|e| TriageError::data(format!("{}: {e}", path.display())))?;
    let s = manifest.size;
    let patches = manifest
        .patches
        .iter()
        .map(|e| {
            let image = tns::read(&dir.join(&e.image_file))?;
            let mask = tns::read(&dir.join(&e.mask_file))?;
            if image.shape() != [1, s, s] || mask.shape() != [s, s] {
                return Err(TriageError::data(format!("{}: patch is not {s}x{s}", e.image_file)));
            }
            Ok(Patch { record: e.record, y: e.y, x: e.x, image, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet { size: s, patches })
}
