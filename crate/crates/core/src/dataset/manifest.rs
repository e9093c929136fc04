//! Dataset records, persistence, and the split manifest.
//!
//! On disk a dataset root holds `manifest.jsonl` (one JSON entry per line)
//! plus `images/` and `masks/` trees. Images are 8-bit PNG (quantized by
//! round(v*255)); masks are 8-bit grayscale PNG with values {0, 255}.
//! Manifest paths are root-relative.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::{self, DegradationSpec};
use crate::error::{Error, Result};
use crate::img::{read_mask_png, read_png, write_mask_png, write_png, RgbImage};
use crate::rng::{derive_seed, Rng};

use super::scene::{generate_scene, SceneConfig};

/// One scene: RGB image in [0,1] plus per-instance visible masks.
#[derive(Clone, Debug)]
pub struct ImageMaskRecord {
    pub id: String,
    pub image: RgbImage,
    pub masks: Vec<Vec<bool>>,
    pub gen_seed: u64,
    pub degradation: Option<DegradationSpec>,
}

impl ImageMaskRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.image.h.is_power_of_two() || !self.image.w.is_power_of_two() {
            return Err(Error::contract("record extents must be powers of two"));
        }
        if self.masks.is_empty() || self.masks.len() > 4 {
            return Err(Error::contract("instance count must be 1..=4"));
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != self.image.h * self.image.w {
                return Err(Error::contract("mask extent mismatch"));
            }
            if m.iter().filter(|&&b| b).count() < 32 {
                return Err(Error::contract(format!("mask {i} below 32 foreground pixels")));
            }
        }
        Ok(())
    }

    /// Apply a degradation; masks are warped only for ElasticTransform.
    pub fn degrade(&self, spec: &DegradationSpec) -> Result<ImageMaskRecord> {
        let (image, masks) = degrade::apply_with_masks(&self.image, &self.masks, spec)?;
        Ok(ImageMaskRecord {
            id: format!("{}+{}", self.id, file_safe_token(spec)),
            image,
            masks,
            gen_seed: self.gen_seed,
            degradation: Some(*spec),
        })
    }
}

fn file_safe_token(spec: &DegradationSpec) -> String {
    spec.to_token().replace(':', "_")
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub masks: Vec<String>,
    pub split: String,
    /// "clear" or a degradation token "kind:severity:seed".
    pub degradation: String,
}

impl ManifestEntry {
    pub fn degradation_spec(&self) -> Result<Option<DegradationSpec>> {
        if self.degradation == "clear" {
            Ok(None)
        } else {
            DegradationSpec::parse(&self.degradation).map(Some)
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries.iter().filter(move |e| e.split == name)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("manifest.jsonl");
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for entry in &self.entries {
            let line = serde_json::to_string(entry)
                .map_err(|e| Error::Manifest(format!("serialize entry {}: {e}", entry.id)))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join("manifest.jsonl");
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut entries = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", ln + 1)))?;
            entries.push(entry);
        }
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(&e.id) {
                return Err(Error::Manifest(format!("duplicate id {}", e.id)));
            }
        }
        Ok(Manifest { entries })
    }
}

/// Write a record's image and masks under the dataset root; returns the
/// manifest entry.
pub fn write_record(root: &Path, record: &ImageMaskRecord, split: &str) -> Result<ManifestEntry> {
    let img_rel = format!("images/{split}/{}.png", record.id);
    let img_path = root.join(&img_rel);
    if let Some(parent) = img_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_png(&img_path, &record.image)?;
    let mut mask_rels = Vec::with_capacity(record.masks.len());
    for (k, mask) in record.masks.iter().enumerate() {
        let mask_rel = format!("masks/{split}/{}_m{k}.png", record.id);
        let mask_path = root.join(&mask_rel);
        if let Some(parent) = mask_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_mask_png(&mask_path, mask, record.image.h, record.image.w)?;
        mask_rels.push(mask_rel);
    }
    Ok(ManifestEntry {
        id: record.id.clone(),
        image: img_rel,
        masks: mask_rels,
        split: split.to_string(),
        degradation: record
            .degradation
            .map(|s| s.to_token())
            .unwrap_or_else(|| "clear".to_string()),
    })
}

/// Load a record back from its manifest entry.
pub fn read_record(root: &Path, entry: &ManifestEntry) -> Result<ImageMaskRecord> {
    let image = read_png(&root.join(&entry.image))?;
    let mut masks = Vec::with_capacity(entry.masks.len());
    for rel in &entry.masks {
        let (mask, h, w) = read_mask_png(&root.join(rel))?;
        if (h, w) != (image.h, image.w) {
            return Err(Error::Manifest(format!("mask extent mismatch in {}", entry.id)));
        }
        masks.push(mask);
    }
    Ok(ImageMaskRecord {
        id: entry.id.clone(),
        image,
        masks,
        gen_seed: 0,
        degradation: entry.degradation_spec()?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generate the dataset: clear scenes for every split; val/test additionally
/// materialize all 16 degraded variants per record. Train-time degradation
/// is sampled on the fly by the harness instead.
pub fn build_dataset(
    root: &Path,
    seed: u64,
    counts: SplitCounts,
    cfg: &SceneConfig,
) -> Result<Manifest> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::contract("split counts must each be >= 1"));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for (split, count, fan_out) in [
        ("train", counts.train, false),
        ("val", counts.val, true),
        ("test", counts.test, true),
    ] {
        for i in 0..count {
            let gen_seed = derive_seed(seed, &format!("scene/{split}"), i as u64);
            let scene = generate_scene(gen_seed, cfg)?;
            let record = ImageMaskRecord {
                id: format!("{split}-{i:05}"),
                image: scene.image,
                masks: scene.masks,
                gen_seed,
                degradation: None,
            };
            record.validate()?;
            entries.push(write_record(root, &record, split)?);
            if fan_out {
                let mut vrng = Rng::new(derive_seed(gen_seed, "variants", 0));
                for kind in degrade::kinds_list() {
                    let severity = 1 + vrng.below(3) as u8;
                    let var_seed = vrng.next_u64();
                    let spec = DegradationSpec::new(kind, severity, var_seed)?;
                    let degraded = record.degrade(&spec)?;
                    entries.push(write_record(root, &degraded, split)?);
                }
            }
        }
    }
    let manifest = Manifest { entries };
    manifest.save(root)?;
    Ok(manifest)
}

/// Deterministic content digest of a dataset directory (paths + bytes).
pub fn dir_digest(root: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut files: Vec<PathBuf> = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(fs::read(f).map_err(|e| Error::io(f, e))?);
    }
    let digest = hasher.finalize();
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}
