//! On-disk dataset layout shared by synthetic builds and external ingestion:
//!
//! ```text
//! images/NNNNNN.png   8-bit RGB
//! masks/NNNNNN.png    8-bit indexed, pixel value = class index
//! meta/NNNNNN.json    ItemMeta
//! manifest.json       written last
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pngio;
use crate::synth::{self, SceneSpec};
use crate::types::{ImageTensor, Profile, SemanticMask};

pub const FORMAT_VERSION: u32 = 1;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemMeta {
    pub index: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

#[derive(Clone, Debug)]
pub struct Item {
    pub image: ImageTensor,
    pub mask: SemanticMask,
    pub meta: ItemMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: String,
    pub profile: Profile,
    pub count: usize,
    pub train_count: usize,
    pub val_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub label_names: Vec<String>,
    /// Items per label, empty when labels are unavailable.
    pub label_counts: Vec<usize>,
    pub attribute_names: Vec<String>,
    pub attributes_available: bool,
    pub identities_available: bool,
    /// Fraction of pixels per semantic class over the whole dataset.
    pub class_pixel_fraction: Vec<f64>,
    pub fingerprint: String,
}

impl DatasetManifest {
    pub fn labels_available(&self) -> bool {
        !self.label_counts.is_empty()
    }

    /// Share of each label among all items.
    pub fn label_balance(&self) -> Vec<f64> {
        self.label_counts.iter().map(|&c| c as f64 / self.count.max(1) as f64).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub items: Vec<Item>,
}

struct Descriptor<'a> {
    source: &'a str,
    seed: Option<u64>,
    label_names: Vec<String>,
    attribute_names: Vec<String>,
}

fn fingerprint(items: &[Item]) -> Result<String> {
    let mut h = Sha256::new();
    for it in items {
        h.update(it.image.pixels().iter().map(|&v| ((v + 1.0) * 127.5).round() as u8).collect::<Vec<_>>());
        h.update(it.mask.labels());
        h.update(serde_json::to_vec(&it.meta)?);
    }
    Ok(hex::encode(h.finalize()))
}

fn summarize(profile: &Profile, items: &[Item], d: Descriptor) -> Result<DatasetManifest> {
    let count = items.len();
    let train_count = items.iter().filter(|i| i.meta.split == Split::Train).count();
    let labels_available = count > 0 && items.iter().all(|i| i.meta.label.is_some());
    let mut label_counts = Vec::new();
    if labels_available {
        label_counts = vec![0; d.label_names.len()];
        for it in items {
            let l = it.meta.label.unwrap_or(0);
            if l == 0 || l > label_counts.len() {
                return Err(Error::Dataset(format!("item {} has label {l} outside 1..={}", it.meta.index, label_counts.len())));
            }
            label_counts[l - 1] += 1;
        }
    }
    let attributes_available = count > 0
        && items
            .iter()
            .all(|i| i.meta.attributes.as_ref().is_some_and(|a| a.len() == d.attribute_names.len()));
    let mut pixels = vec![0usize; profile.num_classes];
    for it in items {
        for (p, c) in pixels.iter_mut().zip(it.mask.class_counts()) {
            *p += c;
        }
    }
    let total = pixels.iter().sum::<usize>().max(1) as f64;
    Ok(DatasetManifest {
        format_version: FORMAT_VERSION,
        source: d.source.into(),
        profile: profile.clone(),
        count,
        train_count,
        val_count: count - train_count,
        seed: d.seed,
        label_names: d.label_names,
        label_counts,
        attribute_names: d.attribute_names,
        attributes_available,
        identities_available: count > 0 && items.iter().all(|i| i.meta.identity.is_some()),
        class_pixel_fraction: pixels.iter().map(|&p| p as f64 / total).collect(),
        fingerprint: fingerprint(items)?,
    })
}

fn split_for(index: usize, count: usize) -> Split {
    if (index as f64) < (count as f64 * TRAIN_FRACTION).round().max(1.0) {
        Split::Train
    } else {
        Split::Val
    }
}

fn item_name(index: usize) -> String {
    format!("{index:06}")
}

/// Renders `count` SemShapes scenes in memory. Images are quantized exactly
/// as a PNG round trip would, so the result equals its persisted form.
pub fn synthesize(count: usize, seed: u64, profile: &Profile) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Precondition("dataset count must be positive".into()));
    }
    profile.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(count);
    for index in 0..count {
        let scene = SceneSpec::sample(&mut rng);
        let r = synth::render_scene(&scene, profile)?;
        items.push(Item {
            image: pngio::quantize(&r.image),
            mask: r.mask,
            meta: ItemMeta {
                index,
                split: split_for(index, count),
                label: Some(r.label),
                attributes: Some(r.attributes.to_vec()),
                identity: Some(scene.identity),
                scene: Some(scene),
            },
        });
    }
    let manifest = summarize(
        profile,
        &items,
        Descriptor {
            source: "synthetic",
            seed: Some(seed),
            label_names: synth::LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            attribute_names: synth::ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        },
    )?;
    Ok(Dataset { manifest, items })
}

/// Synthesizes and persists a dataset under `dir`, which must not exist yet
/// or be empty.
pub fn build_dataset(count: usize, seed: u64, profile: &Profile, dir: &Path) -> Result<Dataset> {
    let ds = synthesize(count, seed, profile)?;
    ds.write(dir)?;
    Ok(ds)
}

fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::Dataset(format!("{} already exists and is not empty", dir.display())));
        }
    }
    for sub in ["images", "masks", "meta"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_fresh_dir(dir)?;
        for it in &self.items {
            let name = item_name(it.meta.index);
            pngio::write_image(&dir.join("images").join(format!("{name}.png")), &it.image)?;
            pngio::write_mask(&dir.join("masks").join(format!("{name}.png")), &it.mask)?;
            write_json(&dir.join("meta").join(format!("{name}.json")), &it.meta)?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Dataset(format!("unsupported dataset format {}", manifest.format_version)));
        }
        let items = (0..manifest.count)
            .map(|i| load_item(dir, &manifest.profile, i))
            .collect::<Result<Vec<_>>>()?;
        let actual = fingerprint(&items)?;
        if actual != manifest.fingerprint {
            return Err(Error::Dataset(format!("{}: content does not match manifest fingerprint", dir.display())));
        }
        Ok(Dataset { manifest, items })
    }

    pub fn profile(&self) -> &Profile {
        &self.manifest.profile
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.meta.split == split)
    }

    pub fn train(&self) -> Vec<&Item> {
        self.split(Split::Train).collect()
    }

    pub fn val(&self) -> Vec<&Item> {
        self.split(Split::Val).collect()
    }
}

/// Reads one item of a persisted dataset without loading the rest.
pub fn load_item(dir: &Path, profile: &Profile, index: usize) -> Result<Item> {
    let name = item_name(index);
    let image = pngio::read_image(&dir.join("images").join(format!("{name}.png")))?;
    profile.check_image(&image)?;
    let mask = pngio::read_mask(&dir.join("masks").join(format!("{name}.png")), profile.num_classes)?;
    profile.check_mask(&mask)?;
    let meta: ItemMeta = read_json(&dir.join("meta").join(format!("{name}.json")))?;
    Ok(Item { image, mask, meta })
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    read_json(&dir.join("manifest.json"))
}

/// Optional per-item metadata accepted by [`ingest_external`].
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExternalMeta {
    // accepted so that a dataset's own meta/ directory can be re-ingested
    #[allow(dead_code)]
    index: Option<usize>,
    split: Option<Split>,
    label: Option<usize>,
    attributes: Option<Vec<bool>>,
    identity: Option<u32>,
    scene: Option<SceneSpec>,
}

#[derive(Clone, Debug)]
pub struct IngestOptions {
    pub label_names: Vec<String>,
    pub attribute_names: Vec<String>,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            label_names: synth::LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            attribute_names: synth::ATTRIBUTE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn external_metadata(path: &Path) -> Result<BTreeMap<String, ExternalMeta>> {
    if path.is_dir() {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(path).map_err(|e| Error::io(path, e))? {
            let p = entry.map_err(|e| Error::io(path, e))?.path();
            if p.extension().is_some_and(|e| e == "json") {
                let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                out.insert(stem, read_json(&p)?);
            }
        }
        Ok(out)
    } else {
        read_json(path)
    }
}

/// Normalizes externally produced image/mask pairs into the dataset layout.
///
/// Files pair by stem. `metadata` is either a JSON object keyed by stem or a
/// directory of `<stem>.json` files; without it labels and attributes are
/// marked unavailable.
pub fn ingest_external(
    image_dir: &Path,
    mask_dir: &Path,
    metadata: Option<&Path>,
    profile: &Profile,
    options: &IngestOptions,
    out_dir: &Path,
) -> Result<Dataset> {
    profile.check()?;
    let images = png_stems(image_dir)?;
    let masks = png_stems(mask_dir)?;
    if let Some(s) = images.keys().find(|s| !masks.contains_key(*s)) {
        return Err(Error::Dataset(format!("{} has no mask", images[s].display())));
    }
    if let Some(s) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Dataset(format!("{} has no image", masks[s].display())));
    }
    if images.is_empty() {
        return Err(Error::Precondition(format!("no PNG files in {}", image_dir.display())));
    }
    let meta = match metadata {
        Some(p) => external_metadata(p)?,
        None => BTreeMap::new(),
    };
    let count = images.len();
    let mut items = Vec::with_capacity(count);
    for (index, (stem, image_path)) in images.iter().enumerate() {
        let image = pngio::read_image(image_path)?;
        profile.check_image(&image).map_err(|e| Error::Dataset(format!("{}: {e}", image_path.display())))?;
        let mask_path = &masks[stem];
        let mask = pngio::read_mask(mask_path, profile.num_classes)
            .and_then(|m| profile.check_mask(&m).map(|_| m))
            .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?;
        let m = meta.get(stem).cloned().unwrap_or_default();
        items.push(Item {
            image,
            mask,
            meta: ItemMeta {
                index,
                split: m.split.unwrap_or_else(|| split_for(index, count)),
                label: m.label,
                attributes: m.attributes,
                identity: m.identity,
                scene: m.scene,
            },
        });
    }
    let manifest = summarize(
        profile,
        &items,
        Descriptor {
            source: "external",
            seed: None,
            label_names: options.label_names.clone(),
            attribute_names: options.attribute_names.clone(),
        },
    )?;
    let ds = Dataset { manifest, items };
    ds.write(out_dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::desk_profile;

    #[test]
    fn synthesis_is_deterministic_and_balanced() {
        let p = desk_profile();
        let a = synthesize(400, 7, &p).unwrap();
        let b = synthesize(400, 7, &p).unwrap();
        assert_eq!(a.manifest, b.manifest);
        let go = a.manifest.label_balance()[1];
        assert!((0.4..=0.6).contains(&go), "go fraction {go}");
        assert_eq!(a.manifest.train_count, 320);
    }

    #[test]
    fn empty_dataset_is_a_precondition_error() {
        assert!(matches!(synthesize(0, 1, &desk_profile()), Err(Error::Precondition(_))));
    }
}
