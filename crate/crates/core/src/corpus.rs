//! Patch data model, synthetic corpus generator, class-balanced sampling,
//! section-level splits and the on-disk corpus format.
//!
//! On disk a corpus is a directory with two files:
//! * `manifest.json`: the [`CorpusManifest`] as UTF-8 JSON;
//! * `patches.bin`: packed `u8` intensities, one row-major square patch per
//!   manifest entry at the entry's byte offset (`value / 255` on load).

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::archive::write_atomic;
use crate::seed::rng_for;

pub const MIN_PATCH_SIDE: usize = 8;
pub const CANONICAL_RESOLUTION_UM: f64 = 2.0;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const STORE_FILE: &str = "patches.bin";

/// Square single-channel image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    side: usize,
    pixels: Vec<f32>,
    resolution_um: f64,
}

impl Patch {
    pub fn new(side: usize, pixels: Vec<f32>, resolution_um: f64) -> Result<Self> {
        if side < MIN_PATCH_SIDE {
            return Err(Error::Shape(format!(
                "patch side {side} is below the minimum of {MIN_PATCH_SIDE}"
            )));
        }
        if pixels.len() != side * side {
            return Err(Error::Shape(format!(
                "patch of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(format!(
                "pixel {i} has intensity {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(Patch {
            side,
            pixels,
            resolution_um,
        })
    }

    pub fn from_fn(side: usize, resolution_um: f64, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut pixels = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                pixels.push(f(r, c));
            }
        }
        Patch::new(side, pixels, resolution_um)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn resolution_um(&self) -> f64 {
        self.resolution_um
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: Patch,
    pub label: usize,
    pub brain_id: u32,
    pub section_id: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub offset: u64,
    pub label: usize,
    pub brain_id: u32,
    pub section_id: u32,
    pub side: usize,
}

impl ManifestEntry {
    pub fn byte_len(&self) -> u64 {
        (self.side * self.side) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub class_count: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub resolution_um: f64,
    pub generator_seed: u64,
}

impl CorpusManifest {
    /// Checks the manifest against itself and against a store of `store_len`
    /// bytes.
    pub fn validate(&self, store_len: u64) -> Result<()> {
        if self.class_names.len() != self.class_count {
            return Err(Error::Manifest(format!(
                "{} class names for class_count {}",
                self.class_names.len(),
                self.class_count
            )));
        }
        let mut prev: Option<&ManifestEntry> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let fail = |message: String| Error::Format { entry: i, message };
            if e.label >= self.class_count {
                return Err(fail(format!(
                    "label {} out of range for {} classes",
                    e.label, self.class_count
                )));
            }
            if e.side < MIN_PATCH_SIDE {
                return Err(fail(format!("patch side {} below minimum", e.side)));
            }
            let end = e.offset.checked_add(e.byte_len());
            if end.is_none_or(|end| end > store_len) {
                return Err(fail(format!(
                    "patch bytes {}..{} exceed store size {store_len}",
                    e.offset,
                    e.offset.saturating_add(e.byte_len())
                )));
            }
            if let Some(p) = prev {
                if (p.section_id, p.offset) >= (e.section_id, e.offset) {
                    return Err(fail("entries not sorted by (section_id, offset)".into()));
                }
            }
            prev = Some(e);
        }
        let mut spans: Vec<(u64, u64, usize)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.offset, e.offset + e.byte_len(), i))
            .collect();
        spans.sort_unstable();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format {
                    entry: w[1].2,
                    message: format!("overlaps entry {}", w[0].2),
                });
            }
        }
        Ok(())
    }

    pub fn section_ids(&self) -> BTreeSet<u32> {
        self.entries.iter().map(|e| e.section_id).collect()
    }

    pub fn section_brains(&self) -> BTreeMap<u32, u32> {
        self.entries.iter().map(|e| (e.section_id, e.brain_id)).collect()
    }
}

/// Manifest plus the packed intensity store. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    store: Vec<u8>,
}

impl Corpus {
    pub fn new(manifest: CorpusManifest, store: Vec<u8>) -> Result<Self> {
        manifest.validate(store.len() as u64)?;
        Ok(Corpus { manifest, store })
    }

    pub fn store(&self) -> &[u8] {
        &self.store
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    pub fn patch(&self, index: usize) -> LabeledPatch {
        let e = &self.manifest.entries[index];
        let start = e.offset as usize;
        let bytes = &self.store[start..start + e.side * e.side];
        let pixels = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        LabeledPatch {
            patch: Patch {
                side: e.side,
                pixels,
                resolution_um: self.manifest.resolution_um,
            },
            label: e.label,
            brain_id: e.brain_id,
            section_id: e.section_id,
        }
    }

    pub fn label(&self, index: usize) -> usize {
        self.manifest.entries[index].label
    }

    pub fn store_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(&self.store))
    }
}

// ------------------------------------------------------------------ generator

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub brains: u32,
    pub sections_per_brain: u32,
    pub seed: u64,
    pub resolution_um: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            per_class: 100,
            side: 64,
            brains: 2,
            sections_per_brain: 5,
            seed: 7,
            resolution_um: CANONICAL_RESOLUTION_UM,
        }
    }
}

const DARKNESS_RANGE: (f64, f64) = (0.1, 1.6);
const RADIUS_RANGE: (f64, f64) = (1.0, 2.6);
const PERIOD_RANGE: (f64, f64) = (6.0, 20.0);
const BLOB_PEAK: f64 = 0.9;
const BACKGROUND: f64 = 0.95;
const PIXEL_NOISE: f64 = 0.02;
const LAYER_CONTRAST: f64 = 0.8;

/// Class texture parameters: mean optical density, blob radius (px) and
/// horizontal layering period (px). Each is a level on an evenly spaced grid.
/// Per-patch jitter is a quarter of the grid spacing, an eighth for darkness
/// so that mean intensity alone separates the classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassTexture {
    pub darkness: f64,
    pub radius: f64,
    pub period: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureJitter {
    pub darkness: f64,
    pub radius: f64,
    pub period: f64,
}

fn grid(range: (f64, f64), classes: usize) -> (Vec<f64>, f64) {
    if classes <= 1 {
        return (vec![(range.0 + range.1) / 2.0], (range.1 - range.0) / 4.0);
    }
    let step = (range.1 - range.0) / (classes - 1) as f64;
    ((0..classes).map(|i| range.0 + i as f64 * step).collect(), step)
}

/// Per-class texture parameters and the intra-class jitter half-widths.
pub fn class_textures(classes: usize, seed: u64) -> (Vec<ClassTexture>, TextureJitter) {
    let (dark, dstep) = grid(DARKNESS_RANGE, classes);
    let (rad, rstep) = grid(RADIUS_RANGE, classes);
    let (per, pstep) = grid(PERIOD_RANGE, classes);
    let order = |tag: u64| {
        let mut idx: Vec<usize> = (0..classes).collect();
        idx.shuffle(&mut rng_for(seed, &[0xC1A5, tag]));
        idx
    };
    let (od, or, op) = (order(0), order(1), order(2));
    let textures = (0..classes)
        .map(|c| ClassTexture {
            darkness: dark[od[c]],
            radius: rad[or[c]],
            period: per[op[c]],
        })
        .collect();
    (
        textures,
        TextureJitter {
            darkness: dstep / 8.0,
            radius: rstep / 4.0,
            period: pstep / 4.0,
        },
    )
}

fn brain_appearance(seed: u64, brain: u32) -> (f64, f64) {
    let mut rng = rng_for(seed, &[0xB4A1, brain as u64]);
    (rng.random_range(0.95..1.05), rng.random_range(-0.03..0.03))
}

fn render_patch(side: usize, tex: &ClassTexture, jitter: &TextureJitter, gain_offset: (f64, f64), rng: &mut impl Rng) -> Vec<u8> {
    let darkness = tex.darkness + rng.random_range(-jitter.darkness..=jitter.darkness);
    let radius = tex.radius + rng.random_range(-jitter.radius..=jitter.radius);
    let period = tex.period + rng.random_range(-jitter.period..=jitter.period);
    let phase = rng.random_range(0.0..2.0 * PI);

    let margin = 3.0 * radius;
    let extent = side as f64 + 2.0 * margin;
    let blob_mass = BLOB_PEAK * 2.0 * PI * radius * radius;
    let count = (darkness * extent * extent / blob_mass).round() as usize;

    let mut od = vec![0.0f64; side * side];
    let reach = (4.0 * radius).ceil() as isize;
    let inv2s2 = 1.0 / (2.0 * radius * radius);
    for _ in 0..count {
        let x = rng.random_range(0.0..extent) - margin;
        // layered density along rows by rejection
        let y = loop {
            let y = rng.random_range(0.0..extent) - margin;
            let accept = (1.0 + LAYER_CONTRAST * (2.0 * PI * y / period + phase).sin())
                / (1.0 + LAYER_CONTRAST);
            if rng.random::<f64>() < accept {
                break y;
            }
        };
        let (cx, cy) = (x.round() as isize, y.round() as isize);
        for r in (cy - reach).max(0)..(cy + reach + 1).min(side as isize) {
            for c in (cx - reach).max(0)..(cx + reach + 1).min(side as isize) {
                let d2 = (r as f64 - y).powi(2) + (c as f64 - x).powi(2);
                od[r as usize * side + c as usize] += BLOB_PEAK * (-d2 * inv2s2).exp();
            }
        }
    }
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("finite std");
    let (gain, offset) = gain_offset;
    od.iter()
        .map(|&d| {
            let v = BACKGROUND * (-d).exp() + noise.sample(rng);
            let v = (gain * v + offset).clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        })
        .collect()
}

/// Renders a class-separable synthetic corpus. Deterministic in `config`.
pub fn generate_synthetic_corpus(config: &SynthConfig) -> Result<Corpus> {
    if config.classes == 0 {
        return Err(Error::Config("class count must be at least 1".into()));
    }
    if config.per_class < 2 {
        return Err(Error::Config(format!(
            "per_class must be at least 2, got {}",
            config.per_class
        )));
    }
    if config.side < 32 {
        return Err(Error::Config(format!(
            "patch side must be at least 32, got {}",
            config.side
        )));
    }
    if config.brains == 0 || config.sections_per_brain == 0 {
        return Err(Error::Config("brains and sections_per_brain must be positive".into()));
    }
    if !(config.resolution_um > 0.0) {
        return Err(Error::Config("resolution_um must be positive".into()));
    }
    let (textures, jitter) = class_textures(config.classes, config.seed);
    let sections = config.brains * config.sections_per_brain;

    // (section, class, k) ordering makes offsets increase with section id.
    let mut slots: Vec<(u32, usize, usize)> = Vec::with_capacity(config.classes * config.per_class);
    for c in 0..config.classes {
        for k in 0..config.per_class {
            slots.push((((k + c) % sections as usize) as u32, c, k));
        }
    }
    slots.sort_unstable();

    let patch_bytes = config.side * config.side;
    let mut store = Vec::with_capacity(slots.len() * patch_bytes);
    let mut entries = Vec::with_capacity(slots.len());
    for (section, class, k) in slots {
        let brain = section / config.sections_per_brain;
        let mut rng = rng_for(config.seed, &[0x9A7C, class as u64, k as u64]);
        let bytes = render_patch(
            config.side,
            &textures[class],
            &jitter,
            brain_appearance(config.seed, brain),
            &mut rng,
        );
        entries.push(ManifestEntry {
            offset: store.len() as u64,
            label: class,
            brain_id: brain,
            section_id: section,
            side: config.side,
        });
        store.extend_from_slice(&bytes);
    }
    let manifest = CorpusManifest {
        class_count: config.classes,
        class_names: (0..config.classes).map(|c| format!("area-{c:02}")).collect(),
        entries,
        resolution_um: config.resolution_um,
        generator_seed: config.seed,
    };
    Corpus::new(manifest, store)
}

// ------------------------------------------------------------------ splits

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_sections: BTreeSet<u32>,
    pub test_sections: BTreeSet<u32>,
    pub holdout_brain: Option<u32>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.train_sections.intersection(&self.test_sections).next() {
            return Err(Error::Config(format!("section {s} is in both train and test")));
        }
        Ok(())
    }

    fn select(&self, manifest: &CorpusManifest, keep: impl Fn(&ManifestEntry) -> bool) -> Vec<usize> {
        manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| keep(e))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_entries(&self, manifest: &CorpusManifest) -> Vec<usize> {
        self.select(manifest, |e| self.train_sections.contains(&e.section_id))
    }

    pub fn test_entries(&self, manifest: &CorpusManifest) -> Vec<usize> {
        self.select(manifest, |e| self.test_sections.contains(&e.section_id))
    }

    /// Every patch of the held-out brain.
    pub fn unseen_entries(&self, manifest: &CorpusManifest) -> Vec<usize> {
        match self.holdout_brain {
            Some(b) => self.select(manifest, |e| e.brain_id == b),
            None => Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split serializes");
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: SplitSpec =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        split.validate()?;
        Ok(split)
    }
}

/// Partitions sections (never individual patches) into train and test. All
/// sections of `holdout_brain` go to neither set.
pub fn split_by_section(
    manifest: &CorpusManifest,
    train_fraction: f64,
    holdout_brain: Option<u32>,
    seed: u64,
) -> Result<SplitSpec> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let brains = manifest.section_brains();
    let mut sections: Vec<u32> = brains
        .iter()
        .filter(|(_, b)| Some(**b) != holdout_brain)
        .map(|(s, _)| *s)
        .collect();
    sections.shuffle(&mut rng_for(seed, &[0x5E17]));
    let n_train = (sections.len() as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train == sections.len() {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} over {} sections leaves an empty train or test set",
            sections.len()
        )));
    }
    let spec = SplitSpec {
        train_sections: sections[..n_train].iter().copied().collect(),
        test_sections: sections[n_train..].iter().copied().collect(),
        holdout_brain,
    };
    spec.validate()?;
    Ok(spec)
}

/// Exactly `per_class` train-split entry indices per class, shuffled.
/// Classes with fewer patches are oversampled: every patch appears
/// `⌊per_class / n⌋` times, the remainder drawn without replacement.
pub fn sample_balanced_epoch(
    manifest: &CorpusManifest,
    split: &SplitSpec,
    per_class: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.class_count];
    for i in split.train_entries(manifest) {
        by_class[manifest.entries[i].label].push(i);
    }
    let mut rng = rng_for(seed, &[0xBA1A]);
    let mut out = Vec::with_capacity(per_class * manifest.class_count);
    for (c, pool) in by_class.iter_mut().enumerate() {
        if pool.is_empty() {
            let name = manifest.class_names.get(c).map(String::as_str).unwrap_or("?");
            return Err(Error::Sampling(format!(
                "class {c} ({name}) has no patches in the train split"
            )));
        }
        let n = pool.len();
        for _ in 0..per_class / n {
            out.extend_from_slice(pool);
        }
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..per_class % n]);
    }
    out.shuffle(&mut rng);
    Ok(out)
}

// ------------------------------------------------------------------ I/O

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(&corpus.manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    write_atomic(&dir.join(STORE_FILE), &corpus.store)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))?;
    let spath = dir.join(STORE_FILE);
    let store = std::fs::read(&spath).map_err(|e| Error::io(&spath, e))?;
    Corpus::new(manifest, store)
}
