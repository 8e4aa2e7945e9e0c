//! Desk-scale stand-ins for the re-identification network and the attribute
//! oracle. The oracle's pooled features also serve as the desk-FID space.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest, ModelKind};
use crate::dataset::{Dataset, Item};
use crate::decision::{backbone_load_named, backbone_to_named, eval_pool, noisy_batch};
use crate::error::{Error, Result};
use crate::models::{Backbone, BackboneArch, Visibility};
use crate::nn::{self, Grads, NamedTensors, ParamId, ParamStore};
use crate::train::{run_training, Hooks, RunSpec, Schedule, TrainControl, Trainable};
use crate::types::{ImageTensor, Profile};

fn normalize(v: &[f64]) -> (Vec<f64>, f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    (v.iter().map(|x| x / n).collect(), n)
}

/// Gradient through `v ↦ v/|v|` given the normalized vector and the norm.
fn normalize_backward(unit: &[f64], norm: f64, d: &[f64]) -> Vec<f64> {
    let dot: f64 = unit.iter().zip(d).map(|(u, g)| u * g).sum();
    unit.iter().zip(d).map(|(u, g)| (g - u * dot) / norm).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub arch: BackboneArch,
    pub embed_dim: usize,
    /// Cosine-softmax temperature.
    pub scale: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub pixel_noise: f32,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            arch: BackboneArch::default(),
            embed_dim: 32,
            scale: 16.0,
            schedule: Schedule { epochs: 20, batch_size: 32, learning_rate: 3e-3, final_lr_fraction: 0.05 },
            seed: 0,
            pixel_noise: 0.03,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbedderArch {
    backbone: BackboneArch,
    embed_dim: usize,
    num_identities: usize,
    scale: f64,
}

/// Maps images to unit-norm identity embeddings. Trained against one
/// learnable proxy per identity.
#[derive(Clone, Debug)]
pub struct IdentityEmbedder {
    pub profile: Profile,
    pub backbone: Backbone<f32>,
    pub num_identities: usize,
    pub scale: f64,
    proxies: ParamStore<f32>,
    proxy_id: ParamId,
}

impl Trainable for IdentityEmbedder {
    fn stores(&self) -> Vec<&ParamStore<f32>> {
        vec![&self.backbone.store, &self.proxies]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        vec![&mut self.backbone.store, &mut self.proxies]
    }
}

impl IdentityEmbedder {
    pub fn new(profile: Profile, arch: BackboneArch, embed_dim: usize, num_identities: usize, scale: f64, seed: u64) -> Self {
        let backbone = Backbone::new(arch, embed_dim, Visibility::full(), seed);
        let mut proxies = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let proxy_id = proxies.add_uniform("proxies", &[num_identities, embed_dim], 3, 1.0, &mut rng);
        IdentityEmbedder { profile, backbone, num_identities, scale, proxies, proxy_id }
    }

    pub fn embed_batch(&self, images: &[&ImageTensor]) -> Vec<Vec<f64>> {
        let e = self.backbone.outputs;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let (raw, _) = self.backbone.forward(&ImageTensor::batch(chunk));
            out.extend(raw.chunks(e).map(|r| normalize(&r.iter().map(|&v| v as f64).collect::<Vec<_>>()).0));
        }
        out
    }

    pub fn embed(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.profile.check_image(image)?;
        Ok(self.embed_batch(&[image]).remove(0))
    }

    pub fn similarity(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
        let (ea, eb) = (self.embed(a)?, self.embed(b)?);
        Ok(ea.iter().zip(&eb).map(|(x, y)| x * y).sum())
    }

    fn to_named(&self) -> NamedTensors {
        let mut n = self.backbone.store.to_named("backbone.");
        n.extend(self.proxies.to_named("head."));
        n
    }

    fn load_named(&mut self, named: &NamedTensors) -> Result<()> {
        self.backbone.store.load_from(&named.with_prefix("backbone."))?;
        self.proxies.load_from(&named.with_prefix("head."))
    }

    fn arch_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(EmbedderArch {
            backbone: self.backbone.arch.clone(),
            embed_dim: self.backbone.outputs,
            num_identities: self.num_identities,
            scale: self.scale,
        })?)
    }

    pub fn load(dir: &Path) -> Result<(IdentityEmbedder, CheckpointManifest)> {
        let (m, named) = checkpoint::load(dir, ModelKind::Embedder)?;
        let a: EmbedderArch = serde_json::from_value(m.arch.clone())?;
        let mut model = IdentityEmbedder::new(m.profile.clone(), a.backbone, a.embed_dim, a.num_identities, a.scale, 0);
        model.load_named(&named)?;
        Ok((model, m))
    }

    /// Proxy cross-entropy and its gradients for one batch.
    fn batch_loss(&self, x: &nn::Map<f32>, ids: &[usize], grads: &mut [Grads<f32>]) -> f64 {
        let (e, k, s) = (self.backbone.outputs, self.num_identities, self.scale);
        let (raw, tape) = self.backbone.forward(x);
        let proxies: Vec<(Vec<f64>, f64)> = self
            .proxies
            .get(self.proxy_id)
            .chunks(e)
            .map(|p| normalize(&p.iter().map(|&v| v as f64).collect::<Vec<_>>()))
            .collect();
        let n = ids.len() as f64;
        let mut loss = 0.0;
        let mut draw = vec![0f32; raw.len()];
        let mut dprox = vec![vec![0f64; e]; k];
        for (b, row) in raw.chunks(e).enumerate() {
            let (u, norm) = normalize(&row.iter().map(|&v| v as f64).collect::<Vec<_>>());
            let logits: Vec<f64> = proxies.iter().map(|(p, _)| s * p.iter().zip(&u).map(|(a, c)| a * c).sum::<f64>()).collect();
            let lsm = nn::log_softmax(&logits);
            loss -= lsm[ids[b]] / n;
            let mut du = vec![0f64; e];
            for (j, l) in lsm.iter().enumerate() {
                let g = (l.exp() - f64::from(j == ids[b])) / n;
                for d in 0..e {
                    du[d] += s * g * proxies[j].0[d];
                    dprox[j][d] += s * g * u[d];
                }
            }
            for (d, v) in normalize_backward(&u, norm, &du).into_iter().enumerate() {
                draw[b * e + d] = v as f32;
            }
        }
        self.backbone.backward(&tape, &draw, Some(&mut grads[0]), false);
        let gp = grads[1].get_mut(self.proxy_id);
        for (j, (p, norm)) in proxies.iter().enumerate() {
            for (d, v) in normalize_backward(p, *norm, &dprox[j]).into_iter().enumerate() {
                gp[j * e + d] += v as f32;
            }
        }
        loss
    }
}

pub fn train_embedder(
    ds: &Dataset,
    cfg: &EmbedderTrainConfig,
    control: TrainControl,
) -> Result<(IdentityEmbedder, CheckpointManifest)> {
    if !ds.manifest.identities_available {
        return Err(Error::Precondition("dataset has no identity factors".into()));
    }
    let train: Vec<&Item> = ds.train().into_iter().filter(|i| i.meta.identity.is_some()).collect();
    let num_identities = train.iter().filter_map(|i| i.meta.identity).max().map_or(0, |m| m as usize + 1);
    if num_identities < 2 {
        return Err(Error::Rejected("identity embedder needs at least two identities".into()));
    }
    let eval: Vec<&Item> = eval_pool(ds).into_iter().filter(|i| i.meta.identity.is_some()).take(200).collect();
    let profile = ds.profile();
    let mut model =
        IdentityEmbedder::new(profile.clone(), cfg.arch.clone(), cfg.embed_dim, num_identities, cfg.scale, cfg.seed);
    let spec = RunSpec {
        kind: ModelKind::Embedder,
        profile,
        arch: model.arch_json()?,
        visibility: None,
        dataset_fingerprint: &ds.manifest.fingerprint,
        seed: cfg.seed,
        training: serde_json::to_value(cfg)?,
        schedule: &cfg.schedule,
    };
    let hooks = Hooks {
        to_named: IdentityEmbedder::to_named,
        load_named: IdentityEmbedder::load_named,
        batch: |m: &IdentityEmbedder, epoch: usize, idx: &[usize], grads: &mut [Grads<f32>]| {
            let x = noisy_batch(&train, idx, cfg.pixel_noise, cfg.seed ^ ((epoch as u64) << 32) ^ idx[0] as u64);
            let ids: Vec<usize> = idx.iter().map(|&i| train[i].meta.identity.unwrap_or(0) as usize).collect();
            Ok(m.batch_loss(&x, &ids, grads))
        },
        evaluate: |m: &IdentityEmbedder| {
            let (same, diff) = pair_separation(m, &eval);
            BTreeMap::from([("val_same_identity_above".to_string(), same), ("val_other_identity_above".to_string(), diff)])
        },
    };
    let manifest = run_training(&mut model, train.len(), spec, control, hooks)?;
    Ok((model, manifest))
}

/// Fractions of same-identity and different-identity pairs whose cosine
/// similarity exceeds the preservation threshold.
pub fn pair_separation(m: &IdentityEmbedder, items: &[&Item]) -> (f64, f64) {
    let emb = m.embed_batch(&items.iter().map(|i| &i.image).collect::<Vec<_>>());
    let (mut same, mut n_same, mut diff, mut n_diff) = (0usize, 0usize, 0usize, 0usize);
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let cos: f64 = emb[a].iter().zip(&emb[b]).map(|(x, y)| x * y).sum();
            let above = usize::from(cos > super::IDENTITY_THRESHOLD);
            if items[a].meta.identity == items[b].meta.identity {
                same += above;
                n_same += 1;
            } else {
                diff += above;
                n_diff += 1;
            }
        }
    }
    (same as f64 / n_same.max(1) as f64, diff as f64 / n_diff.max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleTrainConfig {
    pub arch: BackboneArch,
    pub schedule: Schedule,
    pub seed: u64,
    pub pixel_noise: f32,
}

impl Default for OracleTrainConfig {
    fn default() -> Self {
        OracleTrainConfig {
            arch: BackboneArch::default(),
            schedule: Schedule { epochs: 30, batch_size: 32, learning_rate: 1e-2, final_lr_fraction: 0.05 },
            seed: 0,
            pixel_noise: 0.03,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OracleArch {
    backbone: BackboneArch,
    attribute_names: Vec<String>,
}

/// Multi-attribute classifier: one independent probability per attribute.
#[derive(Clone, Debug)]
pub struct AttributeOracle {
    pub profile: Profile,
    pub attribute_names: Vec<String>,
    pub backbone: Backbone<f32>,
}

impl AttributeOracle {
    pub fn new(profile: Profile, attribute_names: Vec<String>, arch: BackboneArch, seed: u64) -> Self {
        let backbone = Backbone::new(arch, attribute_names.len(), Visibility::full(), seed);
        AttributeOracle { profile, attribute_names, backbone }
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> Vec<Vec<f64>> {
        let a = self.attribute_names.len();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let (raw, _) = self.backbone.forward(&ImageTensor::batch(chunk));
            out.extend(raw.chunks(a).map(|r| r.iter().map(|&v| nn::sigmoid(v as f64)).collect::<Vec<_>>()));
        }
        out
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.profile.check_image(image)?;
        Ok(self.predict_batch(&[image]).remove(0))
    }

    /// Attribute vectors thresholded at 0.5.
    pub fn attributes(&self, images: &[&ImageTensor]) -> Vec<Vec<bool>> {
        self.predict_batch(images).into_iter().map(|p| p.into_iter().map(|v| v > 0.5).collect()).collect()
    }

    /// Pooled penultimate activations, the desk-FID feature space.
    pub fn features(&self, images: &[&ImageTensor]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(images.len());
        let dim = self.backbone.feature_dim();
        for chunk in images.chunks(64) {
            let (_, tape) = self.backbone.forward(&ImageTensor::batch(chunk));
            out.extend(tape.features().chunks(dim).map(|r| r.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        }
        out
    }

    /// Fraction of attribute entries predicted correctly.
    pub fn accuracy(&self, items: &[&Item]) -> f64 {
        let items: Vec<&&Item> = items.iter().filter(|i| i.meta.attributes.is_some()).collect();
        let pred = self.attributes(&items.iter().map(|i| &i.image).collect::<Vec<_>>());
        let (mut ok, mut n) = (0usize, 0usize);
        for (p, it) in pred.iter().zip(&items) {
            for (a, b) in p.iter().zip(it.meta.attributes.as_ref().unwrap()) {
                ok += usize::from(a == b);
                n += 1;
            }
        }
        ok as f64 / n.max(1) as f64
    }

    pub fn load(dir: &Path) -> Result<(AttributeOracle, CheckpointManifest)> {
        let (m, named) = checkpoint::load(dir, ModelKind::Oracle)?;
        let a: OracleArch = serde_json::from_value(m.arch.clone())?;
        let mut model = AttributeOracle::new(m.profile.clone(), a.attribute_names, a.backbone, 0);
        model.backbone.store.load_from(&named)?;
        Ok((model, m))
    }
}

pub fn train_oracle(ds: &Dataset, cfg: &OracleTrainConfig, control: TrainControl) -> Result<(AttributeOracle, CheckpointManifest)> {
    if !ds.manifest.attributes_available {
        return Err(Error::Precondition("dataset has no attribute annotations".into()));
    }
    let train: Vec<&Item> = ds.train().into_iter().filter(|i| i.meta.attributes.is_some()).collect();
    let eval = eval_pool(ds);
    let profile = ds.profile();
    let names = ds.manifest.attribute_names.clone();
    let a = names.len();
    let mut model = AttributeOracle::new(profile.clone(), names.clone(), cfg.arch.clone(), cfg.seed);
    let spec = RunSpec {
        kind: ModelKind::Oracle,
        profile,
        arch: serde_json::to_value(OracleArch { backbone: cfg.arch.clone(), attribute_names: names.clone() })?,
        visibility: None,
        dataset_fingerprint: &ds.manifest.fingerprint,
        seed: cfg.seed,
        training: serde_json::to_value(cfg)?,
        schedule: &cfg.schedule,
    };
    let hooks = Hooks {
        to_named: backbone_to_named,
        load_named: backbone_load_named,
        batch: |b: &Backbone<f32>, epoch: usize, idx: &[usize], grads: &mut [Grads<f32>]| {
            let x = noisy_batch(&train, idx, cfg.pixel_noise, cfg.seed ^ ((epoch as u64) << 32) ^ idx[0] as u64);
            let (raw, tape) = b.forward(&x);
            let count = raw.len() as f64;
            let mut loss = 0.0;
            let mut draw = vec![0f32; raw.len()];
            for (k, (&v, g)) in raw.iter().zip(&mut draw).enumerate() {
                let t = f64::from(u8::from(train[idx[k / a]].meta.attributes.as_ref().unwrap()[k % a]));
                let v = v as f64;
                // binary cross-entropy on logits: softplus(v) - t·v
                loss += (v.max(0.0) + (-v.abs()).exp().ln_1p() - t * v) / count;
                *g = ((nn::sigmoid(v) - t) / count) as f32;
            }
            b.backward(&tape, &draw, Some(&mut grads[0]), false);
            Ok(loss)
        },
        evaluate: |b: &Backbone<f32>| {
            let m = AttributeOracle { profile: profile.clone(), attribute_names: names.clone(), backbone: b.clone() };
            BTreeMap::from([("val_attribute_accuracy".to_string(), m.accuracy(&eval))])
        },
    };
    let manifest = run_training(&mut model.backbone, train.len(), spec, control, hooks)?;
    Ok((model, manifest))
}
