//! Turns an explain request into loaded models and a validated query, and
//! runs it.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use base64::Engine as _;
use steexlab_core::autoencoder::SemanticStack;
use steexlab_core::checkpoint::{self, ModelKind};
use steexlab_core::dataset::{self, Split};
use steexlab_core::decision::DecisionModel;
use steexlab_core::engine::Explainer;
use steexlab_core::pngio;
use steexlab_core::types::{
    resolve_counter_class, CounterClass, CounterfactualRequest, CounterfactualResult, ImageTensor, OptimizerConfig,
    Profile, RegionTargetSpec, SemanticMask,
};

use crate::api::{resolve_regions, ExplainRequest, QuerySource};
use crate::check_id;
use crate::error::{Result, ServiceError};
use crate::registry::{ModelEntry, Registry};

/// Loaded models, keyed by registry id and digest. A checkpoint is checked
/// against its registered digest before it is loaded.
#[derive(Default)]
pub struct ModelCache {
    stacks: Mutex<HashMap<(String, String), Arc<SemanticStack>>>,
    classifiers: Mutex<HashMap<(String, String), Arc<DecisionModel>>>,
}

fn check_digest(registry: &Registry, e: &ModelEntry) -> Result<std::path::PathBuf> {
    let dir = registry.checkpoint_path(e);
    let digest = checkpoint::digest(&dir)?;
    if digest != e.digest {
        return Err(ServiceError::InvalidModel(format!(
            "checkpoint of {:?} changed since registration (digest {digest})",
            e.id
        )));
    }
    Ok(dir)
}

impl ModelCache {
    pub fn stack(&self, registry: &Registry, seg: &ModelEntry, ae: &ModelEntry) -> Result<Arc<SemanticStack>> {
        let key = (format!("{}@{}", seg.id, seg.digest), format!("{}@{}", ae.id, ae.digest));
        let mut stacks = self.stacks.lock().expect("model cache poisoned");
        if let Some(s) = stacks.get(&key) {
            return Ok(s.clone());
        }
        let s = Arc::new(SemanticStack::load(&check_digest(registry, seg)?, &check_digest(registry, ae)?)?);
        stacks.insert(key, s.clone());
        Ok(s)
    }

    pub fn classifier(&self, registry: &Registry, e: &ModelEntry) -> Result<Arc<DecisionModel>> {
        let key = (e.id.clone(), e.digest.clone());
        let mut models = self.classifiers.lock().expect("model cache poisoned");
        if let Some(m) = models.get(&key) {
            return Ok(m.clone());
        }
        let (m, _) = DecisionModel::load(&check_digest(registry, e)?)?;
        let m = Arc::new(m);
        models.insert(key, m.clone());
        Ok(m)
    }
}

/// A request whose models are loaded and whose inputs are checked.
pub struct Prepared {
    pub stack: Arc<SemanticStack>,
    pub model: Arc<DecisionModel>,
    pub model_id: String,
    pub image: ImageTensor,
    pub counter_class: CounterClass,
    pub targets: RegionTargetSpec,
    pub optimizer: OptimizerConfig,
}

fn same_profile(entries: &[&ModelEntry]) -> Result<Profile> {
    let first = entries[0].profile.clone().ok_or_else(|| ServiceError::InvalidModel("model has no profile".into()))?;
    for e in &entries[1..] {
        if e.profile.as_ref() != Some(&first) {
            return Err(ServiceError::Conflict(format!(
                "model {:?} and model {:?} use different profiles",
                entries[0].id, e.id
            )));
        }
    }
    Ok(first)
}

fn dataset_dir(home: &Path, id: &str) -> Result<std::path::PathBuf> {
    check_id("dataset id", id)?;
    let dir = home.join("datasets").join(id);
    if !dir.join("manifest.json").exists() {
        return Err(ServiceError::NotFound(format!("no dataset {id:?}")));
    }
    Ok(dir)
}

/// One item of a dataset stored under `<home>/datasets/<id>`.
pub struct DatasetItem {
    pub manifest: dataset::DatasetManifest,
    pub image: ImageTensor,
    pub mask: SemanticMask,
    pub split: Split,
    pub label: Option<usize>,
}

pub fn dataset_item(home: &Path, id: &str, index: usize) -> Result<DatasetItem> {
    let dir = dataset_dir(home, id)?;
    let manifest = dataset::load_manifest(&dir)?;
    if index >= manifest.count {
        return Err(ServiceError::NotFound(format!("dataset {id:?} has {} items, no item {index}", manifest.count)));
    }
    let it = dataset::load_item(&dir, &manifest.profile, index)?;
    Ok(DatasetItem { manifest, image: it.image, mask: it.mask, split: it.meta.split, label: it.meta.label })
}

fn query_image(home: &Path, q: &QuerySource, profile: &Profile) -> Result<ImageTensor> {
    let image = match q {
        QuerySource::Item(r) => {
            let item = dataset_item(home, &r.dataset, r.index).map_err(|e| match e {
                ServiceError::NotFound(m) => ServiceError::BadRequest(m),
                other => other,
            })?;
            if &item.manifest.profile != profile {
                return Err(ServiceError::Conflict(format!("dataset {:?} uses another profile than the models", r.dataset)));
            }
            item.image
        }
        QuerySource::Png(p) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(p.png_base64.trim())
                .map_err(|e| ServiceError::BadRequest(format!("query is not valid base64: {e}")))?;
            pngio::decode_image(&bytes)?
        }
    };
    profile.check_image(&image)?;
    Ok(image)
}

/// Resolves and validates everything a job needs, without running it.
pub fn prepare(home: &Path, registry: &Registry, cache: &ModelCache, req: &ExplainRequest) -> Result<Prepared> {
    let clf = registry.require(&req.model, ModelKind::Classifier)?;
    let seg = registry.require_or_single(req.segmenter.as_deref(), ModelKind::Segmenter)?;
    let ae = registry.require_or_single(req.autoencoder.as_deref(), ModelKind::Autoencoder)?;
    let profile = same_profile(&[&clf, &seg, &ae])?;
    req.optimizer.validate()?;
    let targets = resolve_regions(req.target_regions.as_deref(), &profile)?;
    let image = query_image(home, &req.query, &profile)?;
    let stack = cache.stack(registry, &seg, &ae)?;
    let model = cache.classifier(registry, &clf)?;
    resolve_counter_class(&model.predict(&image)?, req.counter_class)?;
    Ok(Prepared {
        stack,
        model,
        model_id: clf.id,
        image,
        counter_class: req.counter_class,
        targets,
        optimizer: req.optimizer.clone(),
    })
}

pub fn execute(p: &Prepared) -> Result<CounterfactualResult> {
    let explainer = Explainer::new(&p.stack, &p.model, p.model_id.clone())?;
    Ok(explainer.explain(&CounterfactualRequest {
        query_image: p.image.clone(),
        counter_class: p.counter_class,
        target_regions: p.targets.clone(),
        optimizer: p.optimizer.clone(),
        model_id: p.model_id.clone(),
    })?)
}
