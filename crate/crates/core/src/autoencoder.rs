//! The frozen perception/generation stack: segmenter, style encoder and
//! mask-conditioned generator, with their training procedures.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest, ModelKind};
use crate::dataset::{Dataset, Item};
use crate::error::{Error, Result};
use crate::models::{
    softmax_cross_entropy, EncoderArch, Generator, GeneratorArch, Segmenter, SegmenterArch, StyleEncoder,
};
use crate::nn::{Grads, Map, NamedTensors, ParamStore};
use crate::train::{run_training, Hooks, RunSpec, Schedule, TrainControl, Trainable};
use crate::types::{ImageTensor, Profile, SemanticMask, StyleCodeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterTrainConfig {
    pub arch: SegmenterArch,
    pub schedule: Schedule,
    pub seed: u64,
    /// Probability that a training image is recoloured region by region.
    pub augment_prob: f64,
    /// Classes whose colour may be replaced entirely during augmentation;
    /// all other classes only receive a bounded colour shift.
    pub free_colour_classes: Vec<u8>,
    pub max_shift: f32,
    pub pixel_noise: f32,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        SegmenterTrainConfig {
            arch: SegmenterArch::default(),
            schedule: Schedule { epochs: 12, batch_size: 8, learning_rate: 3e-3, final_lr_fraction: 0.05 },
            seed: 0,
            augment_prob: 0.5,
            free_colour_classes: vec![3, 4, 7],
            max_shift: 0.3,
            pixel_noise: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderTrainConfig {
    pub encoder: EncoderArch,
    pub generator: GeneratorArch,
    pub schedule: Schedule,
    pub seed: u64,
    /// Weight of the mean squared code norm, which keeps codes compact.
    pub code_penalty: f64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        AutoencoderTrainConfig {
            encoder: EncoderArch::default(),
            generator: GeneratorArch::default(),
            schedule: Schedule { epochs: 30, batch_size: 16, learning_rate: 3e-3, final_lr_fraction: 0.05 },
            seed: 0,
            code_penalty: 1e-3,
        }
    }
}

impl Trainable for Segmenter<f32> {
    fn stores(&self) -> Vec<&ParamStore<f32>> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        vec![&mut self.store]
    }
}

/// Style encoder and generator, trained jointly.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub encoder: StyleEncoder<f32>,
    pub generator: Generator<f32>,
}

impl Trainable for Autoencoder {
    fn stores(&self) -> Vec<&ParamStore<f32>> {
        vec![&self.encoder.store, &self.generator.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        vec![&mut self.encoder.store, &mut self.generator.store]
    }
}

impl Autoencoder {
    pub fn new(profile: &Profile, encoder: EncoderArch, generator: GeneratorArch, seed: u64) -> Self {
        Autoencoder {
            encoder: StyleEncoder::new(profile.num_classes, profile.code_dim, encoder, seed),
            generator: Generator::new(profile.num_classes, profile.code_dim, generator, seed.wrapping_add(1)),
        }
    }

    pub fn encode(&self, image: &ImageTensor, mask: &SemanticMask) -> Result<StyleCodeSet> {
        self.encoder.encode(image, mask)
    }

    pub fn generate(&self, mask: &SemanticMask, codes: &StyleCodeSet) -> Result<ImageTensor> {
        self.generator.generate(mask, codes)
    }

    pub fn reconstruct(&self, image: &ImageTensor, mask: &SemanticMask) -> Result<(StyleCodeSet, ImageTensor)> {
        let codes = self.encode(image, mask)?;
        let rec = self.generate(mask, &codes)?;
        Ok((codes, rec))
    }

    fn to_named(&self) -> NamedTensors {
        let mut n = self.encoder.store.to_named("encoder.");
        n.extend(self.generator.store.to_named("generator."));
        n
    }

    fn load_named(&mut self, named: &NamedTensors) -> Result<()> {
        self.encoder.store.load_from(&named.with_prefix("encoder."))?;
        self.generator.store.load_from(&named.with_prefix("generator."))
    }

    pub fn load(dir: &Path) -> Result<(Autoencoder, CheckpointManifest)> {
        let (m, named) = checkpoint::load(dir, ModelKind::Autoencoder)?;
        let arch: AeArch = serde_json::from_value(m.arch.clone())?;
        let mut ae = Autoencoder::new(&m.profile, arch.encoder, arch.generator, 0);
        ae.load_named(&named)?;
        Ok((ae, m))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AeArch {
    encoder: EncoderArch,
    generator: GeneratorArch,
}

pub fn load_segmenter(dir: &Path) -> Result<(Segmenter<f32>, CheckpointManifest)> {
    let (m, named) = checkpoint::load(dir, ModelKind::Segmenter)?;
    let arch: SegmenterArch = serde_json::from_value(m.arch.clone())?;
    let mut s = Segmenter::new(m.profile.num_classes, arch, 0);
    s.store.load_from(&named)?;
    Ok((s, m))
}

fn batch_images(items: &[&Item], idx: &[usize]) -> Map<f32> {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &items[i].image).collect();
    ImageTensor::batch(&imgs)
}

/// Region-wise recolouring used to make the segmenter rely on shape and
/// position rather than exact palette colours.
pub fn recolour<R: Rng>(image: &ImageTensor, mask: &SemanticMask, cfg: &SegmenterTrainConfig, rng: &mut R) -> ImageTensor {
    let n = mask.num_classes();
    let counts = mask.class_counts();
    let mut mean = vec![[0f32; 3]; n];
    for (p, &l) in mask.labels().iter().enumerate() {
        for ch in 0..3 {
            mean[l as usize - 1][ch] += image.pixels()[p * 3 + ch];
        }
    }
    let mut target = vec![[0f32; 3]; n];
    for c in 0..n {
        if counts[c] == 0 {
            continue;
        }
        let m = mean[c].map(|v| v / counts[c] as f32);
        let free = cfg.free_colour_classes.contains(&((c + 1) as u8)) && rng.random_bool(0.5);
        target[c] = if free {
            std::array::from_fn(|_| rng.random_range(-0.95f32..0.95))
        } else {
            std::array::from_fn(|ch| m[ch] + rng.random_range(-cfg.max_shift..=cfg.max_shift))
        };
        for ch in 0..3 {
            target[c][ch] -= m[ch];
        }
    }
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let l = mask.labels()[i / 3] as usize - 1;
            let noise = if cfg.pixel_noise > 0.0 { rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise) } else { 0.0 };
            (v + target[l][i % 3] + noise).clamp(-1.0, 1.0)
        })
        .collect();
    ImageTensor::new(image.height(), image.width(), pixels).expect("recoloured values are clamped")
}

/// Dataset-level mean per-class IoU: intersections and unions are summed
/// over all images, then averaged over classes that occur.
pub fn dataset_miou(pairs: &[(SemanticMask, &SemanticMask)]) -> f64 {
    let Some((first, _)) = pairs.first() else { return 0.0 };
    let n = first.num_classes();
    let (mut inter, mut union) = (vec![0usize; n], vec![0usize; n]);
    for (pred, truth) in pairs {
        for (&a, &b) in pred.labels().iter().zip(truth.labels()) {
            union[a as usize - 1] += 1;
            if a == b {
                inter[a as usize - 1] += 1;
            } else {
                union[b as usize - 1] += 1;
            }
        }
    }
    let ious: Vec<f64> = inter.iter().zip(&union).filter(|(_, &u)| u > 0).map(|(&i, &u)| i as f64 / u as f64).collect();
    ious.iter().sum::<f64>() / ious.len().max(1) as f64
}

pub fn segmenter_miou(seg: &Segmenter<f32>, items: &[&Item]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(items.len());
    for chunk in items.chunks(16) {
        let imgs: Vec<&ImageTensor> = chunk.iter().map(|i| &i.image).collect();
        let preds = seg.segment_batch(&ImageTensor::batch(&imgs))?;
        pairs.extend(preds.into_iter().zip(chunk.iter().map(|i| &i.mask)));
    }
    Ok(dataset_miou(&pairs))
}

fn eval_items(ds: &Dataset, limit: usize) -> Vec<&Item> {
    let val = ds.val();
    let pool = if val.is_empty() { ds.train() } else { val };
    pool.into_iter().take(limit).collect()
}

pub fn train_segmenter(
    ds: &Dataset,
    cfg: &SegmenterTrainConfig,
    control: TrainControl,
) -> Result<(Segmenter<f32>, CheckpointManifest)> {
    let profile = ds.profile();
    let train = ds.train();
    let eval = eval_items(ds, 100);
    let mut model = Segmenter::new(profile.num_classes, cfg.arch.clone(), cfg.seed);
    let nc = profile.num_classes;
    let spec = RunSpec {
        kind: ModelKind::Segmenter,
        profile,
        arch: serde_json::to_value(&cfg.arch)?,
        visibility: None,
        dataset_fingerprint: &ds.manifest.fingerprint,
        seed: cfg.seed,
        training: serde_json::to_value(cfg)?,
        schedule: &cfg.schedule,
    };
    let hooks = Hooks {
        to_named: |m: &Segmenter<f32>| m.store.to_named(""),
        load_named: |m: &mut Segmenter<f32>, n: &NamedTensors| m.store.load_from(n),
        batch: |m: &Segmenter<f32>, epoch: usize, idx: &[usize], grads: &mut [Grads<f32>]| {
            let mut imgs = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((epoch as u64) << 32) ^ i as u64);
                let it = train[i];
                imgs.push(if rng.random_bool(cfg.augment_prob) {
                    recolour(&it.image, &it.mask, cfg, &mut rng)
                } else {
                    it.image.clone()
                });
            }
            let x = ImageTensor::batch(&imgs.iter().collect::<Vec<_>>());
            let (logits, tape) = m.forward(&x);
            let targets: Vec<usize> =
                idx.iter().flat_map(|&i| train[i].mask.labels().iter().map(|&l| l as usize - 1)).collect();
            let (loss, dl) = softmax_cross_entropy(&logits.data, nc, &targets, None);
            m.backward(&tape, &Map::from_vec(logits.n, logits.h, logits.w, nc, dl), &mut grads[0]);
            Ok(loss as f64)
        },
        evaluate: |m: &Segmenter<f32>| {
            let miou = segmenter_miou(m, &eval).unwrap_or(f64::NAN);
            BTreeMap::from([("val_miou".to_string(), miou)])
        },
    };
    let manifest = run_training(&mut model, train.len(), spec, control, hooks)?;
    Ok((model, manifest))
}

/// Mean absolute per-channel reconstruction error.
pub fn reconstruction_mae(ae: &Autoencoder, items: &[&Item]) -> Result<f64> {
    let mut total = 0.0;
    for it in items {
        let (_, rec) = ae.reconstruct(&it.image, &it.mask)?;
        total += rec.mean_abs_diff(&it.image);
    }
    Ok(total / items.len().max(1) as f64)
}

pub fn train_autoencoder(
    ds: &Dataset,
    cfg: &AutoencoderTrainConfig,
    control: TrainControl,
) -> Result<(Autoencoder, CheckpointManifest)> {
    let profile = ds.profile();
    let train = ds.train();
    let eval = eval_items(ds, 100);
    let mut model = Autoencoder::new(profile, cfg.encoder.clone(), cfg.generator.clone(), cfg.seed);
    let d = profile.code_dim;
    let spec = RunSpec {
        kind: ModelKind::Autoencoder,
        profile,
        arch: serde_json::to_value(AeArch { encoder: cfg.encoder.clone(), generator: cfg.generator.clone() })?,
        visibility: None,
        dataset_fingerprint: &ds.manifest.fingerprint,
        seed: cfg.seed,
        training: serde_json::to_value(cfg)?,
        schedule: &cfg.schedule,
    };
    let hooks = Hooks {
        to_named: Autoencoder::to_named,
        load_named: Autoencoder::load_named,
        batch: |m: &Autoencoder, _epoch: usize, idx: &[usize], grads: &mut [Grads<f32>]| {
            let x = batch_images(&train, idx);
            let masks: Vec<&SemanticMask> = idx.iter().map(|&i| &train[i].mask).collect();
            let (codes, present, etape) = m.encoder.forward(&x, &masks);
            let layout = m.generator.layout(&masks)?;
            let (out, gtape) = m.generator.forward(&layout, &codes);
            let count = out.data.len() as f32;
            let mut l1 = 0.0f64;
            let mut dout = Map::zeros(out.n, out.h, out.w, out.c);
            for ((g, o), t) in dout.data.iter_mut().zip(&out.data).zip(&x.data) {
                let diff = o - t;
                l1 += diff.abs() as f64;
                *g = diff.signum() / count;
            }
            let (dg, de) = grads.split_at_mut(1);
            let mut dcodes = m.generator.backward(&layout, &gtape, &dout, Some(&mut de[0]));
            let n_present = present.iter().filter(|&&p| p).count().max(1) as f32;
            let alpha = cfg.code_penalty as f32;
            let mut penalty = 0.0f64;
            for (row, p) in present.iter().enumerate() {
                if *p {
                    for k in row * d..(row + 1) * d {
                        penalty += (codes[k] * codes[k]) as f64;
                        dcodes[k] += 2.0 * alpha * codes[k] / n_present;
                    }
                }
            }
            m.encoder.backward(&etape, &dcodes, &mut dg[0]);
            Ok(l1 / count as f64 + cfg.code_penalty * penalty / n_present as f64)
        },
        evaluate: |m: &Autoencoder| {
            let mae = reconstruction_mae(m, &eval).unwrap_or(f64::NAN);
            BTreeMap::from([("val_mae".to_string(), mae)])
        },
    };
    let manifest = run_training(&mut model, train.len(), spec, control, hooks)?;
    Ok((model, manifest))
}

/// Segmenter plus autoencoder: everything needed to decompose a query.
#[derive(Clone, Debug)]
pub struct SemanticStack {
    pub profile: Profile,
    pub segmenter: Segmenter<f32>,
    pub autoencoder: Autoencoder,
}

impl SemanticStack {
    pub fn new(segmenter: Segmenter<f32>, autoencoder: Autoencoder, profile: Profile) -> Result<Self> {
        if segmenter.num_classes != profile.num_classes
            || autoencoder.generator.num_classes != profile.num_classes
            || autoencoder.generator.code_dim != profile.code_dim
        {
            return Err(Error::Config("segmenter and autoencoder profiles differ".into()));
        }
        Ok(SemanticStack { profile, segmenter, autoencoder })
    }

    pub fn load(segmenter_dir: &Path, autoencoder_dir: &Path) -> Result<Self> {
        let (seg, sm) = load_segmenter(segmenter_dir)?;
        let (ae, am) = Autoencoder::load(autoencoder_dir)?;
        if sm.profile != am.profile {
            return Err(Error::Config("segmenter and autoencoder were trained on different profiles".into()));
        }
        Self::new(seg, ae, am.profile)
    }

    pub fn segment(&self, image: &ImageTensor) -> Result<SemanticMask> {
        self.profile.check_image(image)?;
        self.segmenter.segment(image)
    }
}
