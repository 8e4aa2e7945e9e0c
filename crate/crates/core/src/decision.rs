//! Frozen classifiers under explanation, including region-masked variants.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointManifest, ModelKind};
use crate::dataset::{Dataset, Item};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, softmax_cross_entropy, Backbone, BackboneArch, Visibility};
use crate::nn::{self, Grads, Map, NamedTensors, ParamStore};
use crate::train::{run_training, Hooks, RunSpec, Schedule, TrainControl, Trainable};
use crate::types::{ImageTensor, Profile};

impl Trainable for Backbone<f32> {
    fn stores(&self) -> Vec<&ParamStore<f32>> {
        vec![&self.store]
    }

    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f32>> {
        vec![&mut self.store]
    }
}

pub(crate) fn backbone_to_named(b: &Backbone<f32>) -> NamedTensors {
    b.store.to_named("")
}

pub(crate) fn backbone_load_named(b: &mut Backbone<f32>, n: &NamedTensors) -> Result<()> {
    b.store.load_from(n)
}

/// Uniform pixel noise used as light augmentation for every backbone model.
pub(crate) fn noisy_batch(items: &[&Item], idx: &[usize], noise: f32, seed: u64) -> Map<f32> {
    let imgs: Vec<&ImageTensor> = idx.iter().map(|&i| &items[i].image).collect();
    let mut x: Map<f32> = ImageTensor::batch(&imgs);
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut x.data {
            *v = (*v + rng.random_range(-noise..=noise)).clamp(-1.0, 1.0);
        }
    }
    x
}

pub(crate) fn eval_pool(ds: &Dataset) -> Vec<&Item> {
    let val = ds.val();
    if val.is_empty() {
        ds.train()
    } else {
        val
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub arch: BackboneArch,
    pub visibility: Visibility,
    pub schedule: Schedule,
    pub seed: u64,
    pub pixel_noise: f32,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            arch: BackboneArch::default(),
            visibility: Visibility::full(),
            schedule: Schedule { epochs: 20, batch_size: 32, learning_rate: 3e-3, final_lr_fraction: 0.05 },
            seed: 0,
            pixel_noise: 0.03,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierArch {
    backbone: BackboneArch,
    label_names: Vec<String>,
}

/// A frozen differentiable classifier with softmax outputs.
#[derive(Clone, Debug)]
pub struct DecisionModel {
    pub profile: Profile,
    pub label_names: Vec<String>,
    pub backbone: Backbone<f32>,
}

impl DecisionModel {
    pub fn new(profile: Profile, label_names: Vec<String>, arch: BackboneArch, visibility: Visibility, seed: u64) -> Self {
        let backbone = Backbone::new(arch, label_names.len(), visibility, seed);
        DecisionModel { profile, label_names, backbone }
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    pub fn visibility(&self) -> &Visibility {
        &self.backbone.visibility
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<Vec<f64>> {
        self.profile.check_image(image)?;
        Ok(self.predict_batch(&[image]).remove(0))
    }

    pub fn predict_batch(&self, images: &[&ImageTensor]) -> Vec<Vec<f64>> {
        let k = self.num_classes();
        let (logits, _) = self.backbone.forward(&ImageTensor::batch(images));
        logits.chunks(k).map(|row| nn::softmax(&row.iter().map(|&v| v as f64).collect::<Vec<_>>())).collect()
    }

    /// Fraction of labelled items whose argmax matches the label.
    pub fn accuracy(&self, items: &[&Item]) -> f64 {
        let labelled: Vec<&&Item> = items.iter().filter(|i| i.meta.label.is_some()).collect();
        let mut correct = 0;
        for chunk in labelled.chunks(64) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|i| &i.image).collect();
            let (logits, _) = self.backbone.forward(&ImageTensor::batch(&imgs));
            for (pred, it) in argmax_rows(&logits, self.num_classes()).into_iter().zip(chunk) {
                correct += usize::from(Some(pred + 1) == it.meta.label);
            }
        }
        correct as f64 / labelled.len().max(1) as f64
    }

    fn arch_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(ClassifierArch {
            backbone: self.backbone.arch.clone(),
            label_names: self.label_names.clone(),
        })?)
    }

    pub fn load(dir: &Path) -> Result<(DecisionModel, CheckpointManifest)> {
        let (m, named) = checkpoint::load(dir, ModelKind::Classifier)?;
        let arch: ClassifierArch = serde_json::from_value(m.arch.clone())?;
        let vis = m.visibility.clone().unwrap_or_else(Visibility::full);
        let mut model = DecisionModel::new(m.profile.clone(), arch.label_names, arch.backbone, vis, 0);
        model.backbone.store.load_from(&named)?;
        Ok((model, m))
    }
}

pub fn train_classifier(
    ds: &Dataset,
    cfg: &ClassifierTrainConfig,
    control: TrainControl,
) -> Result<(DecisionModel, CheckpointManifest)> {
    if !ds.manifest.labels_available() {
        return Err(Error::Precondition("dataset has no labels".into()));
    }
    let populated = ds.manifest.label_counts.iter().filter(|&&c| c > 0).count();
    if populated < 2 {
        return Err(Error::Rejected(format!("dataset holds {populated} label class(es); a classifier needs at least two")));
    }
    let train: Vec<&Item> = ds.train().into_iter().filter(|i| i.meta.label.is_some()).collect();
    let eval = eval_pool(ds);
    let profile = ds.profile();
    let mut model = DecisionModel::new(
        profile.clone(),
        ds.manifest.label_names.clone(),
        cfg.arch.clone(),
        cfg.visibility.clone(),
        cfg.seed,
    );
    let k = model.num_classes();
    let spec = RunSpec {
        kind: ModelKind::Classifier,
        profile,
        arch: model.arch_json()?,
        visibility: Some(cfg.visibility.clone()),
        dataset_fingerprint: &ds.manifest.fingerprint,
        seed: cfg.seed,
        training: serde_json::to_value(cfg)?,
        schedule: &cfg.schedule,
    };
    let label_names = model.label_names.clone();
    let hooks = Hooks {
        to_named: backbone_to_named,
        load_named: backbone_load_named,
        batch: |b: &Backbone<f32>, epoch: usize, idx: &[usize], grads: &mut [Grads<f32>]| {
            let x = noisy_batch(&train, idx, cfg.pixel_noise, cfg.seed ^ ((epoch as u64) << 32) ^ idx[0] as u64);
            let targets: Vec<usize> = idx.iter().map(|&i| train[i].meta.label.unwrap_or(1) - 1).collect();
            let (logits, tape) = b.forward(&x);
            let (loss, dl) = softmax_cross_entropy(&logits, k, &targets, None);
            b.backward(&tape, &dl, Some(&mut grads[0]), false);
            Ok(loss as f64)
        },
        evaluate: |b: &Backbone<f32>| {
            let m = DecisionModel { profile: profile.clone(), label_names: label_names.clone(), backbone: b.clone() };
            BTreeMap::from([("val_accuracy".to_string(), m.accuracy(&eval))])
        },
    };
    let manifest = run_training(&mut model.backbone, train.len(), spec, control, hooks)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{desk_profile, top_region};

    #[test]
    fn masked_model_ignores_hidden_pixels() {
        let p = desk_profile();
        let vis = Visibility::region("top", top_region(&p));
        let m = DecisionModel::new(p.clone(), vec!["stop".into(), "go".into()], BackboneArch::default(), vis, 3);
        let a = ImageTensor::filled(64, 64, [0.2, -0.3, 0.5]).unwrap();
        let mut px = a.pixels().to_vec();
        for v in &mut px[40 * 64 * 3..] {
            *v = -*v;
        }
        let b = ImageTensor::new(64, 64, px).unwrap();
        assert_eq!(m.predict(&a).unwrap(), m.predict(&b).unwrap());
    }

    #[test]
    fn gray_image_gives_a_distribution() {
        let p = desk_profile();
        let m = DecisionModel::new(p, vec!["stop".into(), "go".into()], BackboneArch::default(), Visibility::full(), 1);
        let probs = m.predict(&ImageTensor::filled(64, 64, [0.0; 3]).unwrap()).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}
