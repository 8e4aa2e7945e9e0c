//! Shared mini-batch training loop with resumable Adam state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointManifest, EpochLog, ModelKind};
use crate::error::{Error, Result};
use crate::models::Visibility;
use crate::nn::{Adam, AdamConfig, Grads, NamedTensors, ParamStore};
use crate::types::Profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the initial one (cosine decay).
    pub final_lr_fraction: f64,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let t = epoch as f64 / self.epochs.max(1) as f64;
        let f = self.final_lr_fraction + (1.0 - self.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.learning_rate * f
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("epochs, batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A model whose parameters live in one or more f32 stores.
pub trait Trainable {
    fn stores(&self) -> Vec<&ParamStore<f32>>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore<f32>>;
}

/// Optimizer state for every store of a model.
pub struct Optimizers {
    adams: Vec<Adam<f32>>,
}

impl Optimizers {
    pub fn new<M: Trainable>(model: &M, lr: f64) -> Self {
        Optimizers { adams: model.stores().into_iter().map(|s| Adam::new(AdamConfig::with_lr(lr), s)).collect() }
    }

    pub fn to_named<M: Trainable>(&self, model: &M) -> NamedTensors {
        let mut out = NamedTensors::default();
        for (i, (a, s)) in self.adams.iter().zip(model.stores()).enumerate() {
            out.extend(a.to_named(s, &format!("opt{i}.")));
        }
        out
    }

    pub fn load_named<M: Trainable>(&mut self, model: &M, named: &NamedTensors) -> Result<()> {
        for (i, (a, s)) in self.adams.iter_mut().zip(model.stores()).enumerate() {
            a.load_named(s, named, &format!("opt{i}."))?;
        }
        Ok(())
    }
}

/// Runs epochs `history.len()..end_epoch` of `schedule`.
///
/// `batch` accumulates gradients for the given epoch and item indices and
/// returns the batch loss; `epoch_end` sees the model after each epoch and may add
/// metrics to its log entry (and persist a checkpoint). A non-finite loss
/// aborts with a training failure before the parameters are touched.
pub fn fit<M: Trainable>(
    model: &mut M,
    optim: &mut Optimizers,
    n_items: usize,
    schedule: &Schedule,
    end_epoch: usize,
    seed: u64,
    history: &mut Vec<EpochLog>,
    mut batch: impl FnMut(&M, usize, &[usize], &mut [Grads<f32>]) -> Result<f64>,
    mut epoch_end: impl FnMut(&M, &Optimizers, &mut EpochLog, &[EpochLog]) -> Result<()>,
) -> Result<()> {
    schedule.validate()?;
    if n_items == 0 {
        return Err(Error::Precondition("training set is empty".into()));
    }
    for epoch in history.len()..end_epoch.min(schedule.epochs) {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64)));
        let lr = schedule.lr_at(epoch);
        for a in &mut optim.adams {
            a.config.lr = lr;
        }
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(schedule.batch_size) {
            let mut grads: Vec<Grads<f32>> = model.stores().into_iter().map(Grads::zeros_like).collect();
            let loss = batch(model, epoch, chunk, &mut grads)?;
            if !loss.is_finite() || grads.iter().any(|g| g.iter().flatten().any(|v| !v.is_finite())) {
                return Err(Error::TrainingFailure { epoch, message: format!("non-finite loss {loss}") });
            }
            for ((a, s), g) in optim.adams.iter_mut().zip(model.stores_mut()).zip(&grads) {
                a.step(s, g);
            }
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let mut log = EpochLog { epoch, loss: total / count as f64, metrics: Default::default() };
        epoch_end(model, optim, &mut log, history)?;
        history.push(log);
    }
    Ok(())
}

/// Where and how far a training call runs.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainControl<'a> {
    /// Checkpoint directory; an existing checkpoint there is resumed.
    pub checkpoint_dir: Option<&'a Path>,
    /// Stop after this many epochs in this call (the schedule is unchanged).
    pub stop_after_epochs: Option<usize>,
}

/// Everything about a run that goes into its checkpoint manifest.
pub struct RunSpec<'a> {
    pub kind: ModelKind,
    pub profile: &'a Profile,
    pub arch: serde_json::Value,
    pub visibility: Option<Visibility>,
    pub dataset_fingerprint: &'a str,
    pub seed: u64,
    pub training: serde_json::Value,
    pub schedule: &'a Schedule,
}

/// Network-specific hooks of [`run_training`].
pub struct Hooks<M, B, V> {
    pub to_named: fn(&M) -> NamedTensors,
    pub load_named: fn(&mut M, &NamedTensors) -> Result<()>,
    pub batch: B,
    pub evaluate: V,
}

/// Trains `model` on `n_items` items, resuming from and checkpointing into
/// `control.checkpoint_dir` when given. The checkpoint is rewritten after
/// every epoch, so a failure leaves the last good epoch on disk.
pub fn run_training<M, B, V>(
    model: &mut M,
    n_items: usize,
    spec: RunSpec,
    control: TrainControl,
    mut hooks: Hooks<M, B, V>,
) -> Result<CheckpointManifest>
where
    M: Trainable,
    B: FnMut(&M, usize, &[usize], &mut [Grads<f32>]) -> Result<f64>,
    V: FnMut(&M) -> BTreeMap<String, f64>,
{
    let mut manifest = CheckpointManifest {
        format_version: checkpoint::FORMAT_VERSION,
        kind: spec.kind,
        profile: spec.profile.clone(),
        arch: spec.arch,
        dataset_fingerprint: spec.dataset_fingerprint.to_string(),
        seed: spec.seed,
        visibility: spec.visibility,
        training: spec.training,
        history: Vec::new(),
        metrics: BTreeMap::new(),
        weights_sha256: String::new(),
    };
    let mut optim = Optimizers::new(model, spec.schedule.learning_rate);
    if let Some(dir) = control.checkpoint_dir {
        if dir.join(checkpoint::MANIFEST).exists() {
            let (old, weights) = checkpoint::load(dir, spec.kind)?;
            if old.training != manifest.training || old.arch != manifest.arch || old.visibility != manifest.visibility {
                return Err(Error::Checkpoint(format!("{}: training configuration differs from checkpoint", dir.display())));
            }
            if old.dataset_fingerprint != manifest.dataset_fingerprint || old.profile != manifest.profile {
                return Err(Error::Checkpoint(format!("{}: checkpoint was trained on another dataset", dir.display())));
            }
            (hooks.load_named)(model, &weights)?;
            if old.history.len() < spec.schedule.epochs {
                let state = checkpoint::load_train_state(dir)?
                    .ok_or_else(|| Error::Checkpoint(format!("{}: no optimizer state to resume", dir.display())))?;
                optim.load_named(model, &state)?;
            }
            manifest = old;
        }
    }
    let start = manifest.history.len();
    let end = control.stop_after_epochs.map_or(spec.schedule.epochs, |n| start + n);
    let mut history = std::mem::take(&mut manifest.history);
    let epochs = spec.schedule.epochs;
    let manifest_cell = std::cell::RefCell::new(manifest);
    fit(model, &mut optim, n_items, spec.schedule, end, spec.seed, &mut history, hooks.batch, |m, opt, log, prev| {
        log.metrics = (hooks.evaluate)(m);
        let mut man = manifest_cell.borrow_mut();
        man.metrics = log.metrics.clone();
        if let Some(dir) = control.checkpoint_dir {
            man.history = prev.to_vec();
            man.history.push(log.clone());
            let state = (log.epoch + 1 < epochs).then(|| opt.to_named(m));
            checkpoint::save(dir, &mut man, &(hooks.to_named)(m), state.as_ref())?;
        }
        Ok(())
    })?;
    let mut manifest = manifest_cell.into_inner();
    manifest.history = history;
    if control.checkpoint_dir.is_none() {
        manifest.weights_sha256 = hex::encode(Sha256::digest((hooks.to_named)(model).to_safetensors()?));
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = Schedule { epochs: 10, batch_size: 4, learning_rate: 1.0, final_lr_fraction: 0.1 };
        assert!((s.lr_at(0) - 1.0).abs() < 1e-12);
        assert!(s.lr_at(9) > 0.1 && s.lr_at(9) < 0.2);
        assert!(s.lr_at(3) > s.lr_at(4));
    }
}
