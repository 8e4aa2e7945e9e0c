use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};
use steexlab_core::autoencoder::{train_autoencoder, train_segmenter, AutoencoderTrainConfig, SegmenterTrainConfig};
use steexlab_core::checkpoint::{self, CheckpointManifest, ModelKind};
use steexlab_core::dataset::Dataset;
use steexlab_core::decision::{train_classifier, ClassifierTrainConfig};
use steexlab_core::eval::{train_embedder, train_oracle, EmbedderTrainConfig, OracleTrainConfig};
use steexlab_core::models::Visibility;
use steexlab_core::synth::{bottom_region, mid_region, top_region};
use steexlab_core::train::{Schedule, TrainControl};
use steexlab_core::types::Profile;
use steexlab_service::registry::Registry;

use super::{dir_or_id, load_config, Output, RESOLVED_CONFIG};

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TrainKind {
    Seg,
    Ae,
    Clf,
    Embedder,
    Oracle,
}

impl TrainKind {
    fn model_kind(self) -> ModelKind {
        match self {
            TrainKind::Seg => ModelKind::Segmenter,
            TrainKind::Ae => ModelKind::Autoencoder,
            TrainKind::Clf => ModelKind::Classifier,
            TrainKind::Embedder => ModelKind::Embedder,
            TrainKind::Oracle => ModelKind::Oracle,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum VisibilityArg {
    Full,
    Top,
    Mid,
    Bottom,
}

impl VisibilityArg {
    fn resolve(self, p: &Profile) -> Visibility {
        match self {
            VisibilityArg::Full => Visibility::full(),
            VisibilityArg::Top => Visibility::region("top", top_region(p)),
            VisibilityArg::Mid => Visibility::region("mid", mid_region(p)),
            VisibilityArg::Bottom => Visibility::region("bottom", bottom_region(p)),
        }
    }
}

#[derive(Args)]
pub struct TrainArgs {
    pub kind: TrainKind,
    /// Dataset directory or id under `<home>/datasets`.
    #[arg(long)]
    pub dataset: String,
    /// Model id; the checkpoint goes to `<home>/models/<id>`.
    #[arg(long, required_unless_present = "out")]
    pub id: Option<String>,
    #[arg(long, conflicts_with = "id")]
    pub out: Option<PathBuf>,
    /// Training configuration JSON of the chosen kind.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Classifier input region.
    #[arg(long)]
    pub visibility: Option<VisibilityArg>,
    /// Continue an interrupted run in an existing checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    /// Add the finished checkpoint to the registry under --id.
    #[arg(long, requires = "id")]
    pub register: bool,
}

#[derive(Serialize)]
struct TrainSnapshot<'a, C> {
    kind: ModelKind,
    dataset: &'a Path,
    dataset_fingerprint: &'a str,
    training: &'a C,
}

fn checkpoint_dir(home: &Path, a: &TrainArgs) -> Result<PathBuf> {
    match (&a.id, &a.out) {
        (_, Some(p)) => Ok(p.clone()),
        (Some(id), None) => {
            steexlab_service::check_id("model id", id)?;
            Ok(home.join("models").join(id))
        }
        (None, None) => bail!("give --id or --out"),
    }
}

/// Append-only: an existing directory is only touched by `--resume`, and
/// then only with the configuration it was started with.
fn claim_dir(dir: &Path, resume: bool, snapshot: &Value) -> Result<()> {
    let used = dir.exists() && std::fs::read_dir(dir)?.next().is_some();
    let snap_path = dir.join(RESOLVED_CONFIG);
    if used && !resume {
        bail!("{} already exists; pass --resume to continue it", dir.display());
    }
    if used {
        let bytes = std::fs::read(&snap_path).with_context(|| format!("{} has no resolved config", dir.display()))?;
        let previous: Value = serde_json::from_slice(&bytes)?;
        if &previous != snapshot {
            bail!("{} was started with another configuration", dir.display());
        }
        return Ok(());
    }
    std::fs::create_dir_all(dir)?;
    super::write_snapshot(dir, snapshot)
}

fn overrides(schedule: &mut Schedule, seed: &mut u64, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        schedule.epochs = e;
    }
    if let Some(s) = a.seed {
        *seed = s;
    }
}

fn run<C: Serialize + DeserializeOwned + Default>(
    a: &TrainArgs,
    ds: &Dataset,
    ds_dir: &Path,
    dir: &Path,
    adjust: impl FnOnce(&mut C),
    train: impl FnOnce(&Dataset, &C, TrainControl) -> steexlab_core::Result<CheckpointManifest>,
) -> Result<CheckpointManifest> {
    let mut cfg: C = load_config(a.config.as_deref())?;
    adjust(&mut cfg);
    let dataset_dir = std::path::absolute(ds_dir)?;
    let snapshot = serde_json::to_value(TrainSnapshot {
        kind: a.kind.model_kind(),
        dataset: &dataset_dir,
        dataset_fingerprint: &ds.manifest.fingerprint,
        training: &cfg,
    })?;
    claim_dir(dir, a.resume, &snapshot)?;
    Ok(train(ds, &cfg, TrainControl { checkpoint_dir: Some(dir), stop_after_epochs: None })?)
}

pub fn train(home: &Path, a: TrainArgs) -> Output {
    let ds_dir = dir_or_id(home, "datasets", &a.dataset);
    let ds = Dataset::load(&ds_dir)?;
    let dir = checkpoint_dir(home, &a)?;
    let profile = ds.profile().clone();
    let manifest = match a.kind {
        TrainKind::Seg => run(&a, &ds, &ds_dir, &dir, |c: &mut SegmenterTrainConfig| overrides(&mut c.schedule, &mut c.seed, &a), |d, c, t| {
            train_segmenter(d, c, t).map(|r| r.1)
        })?,
        TrainKind::Ae => run(&a, &ds, &ds_dir, &dir, |c: &mut AutoencoderTrainConfig| overrides(&mut c.schedule, &mut c.seed, &a), |d, c, t| {
            train_autoencoder(d, c, t).map(|r| r.1)
        })?,
        TrainKind::Clf => run(
            &a,
            &ds,
            &ds_dir,
            &dir,
            |c: &mut ClassifierTrainConfig| {
                overrides(&mut c.schedule, &mut c.seed, &a);
                if let Some(v) = a.visibility {
                    c.visibility = v.resolve(&profile);
                }
            },
            |d, c, t| train_classifier(d, c, t).map(|r| r.1),
        )?,
        TrainKind::Embedder => run(&a, &ds, &ds_dir, &dir, |c: &mut EmbedderTrainConfig| overrides(&mut c.schedule, &mut c.seed, &a), |d, c, t| {
            train_embedder(d, c, t).map(|r| r.1)
        })?,
        TrainKind::Oracle => run(&a, &ds, &ds_dir, &dir, |c: &mut OracleTrainConfig| overrides(&mut c.schedule, &mut c.seed, &a), |d, c, t| {
            train_oracle(d, c, t).map(|r| r.1)
        })?,
    };
    if a.visibility.is_some() && !matches!(a.kind, TrainKind::Clf) {
        eprintln!("note: --visibility only applies to classifiers and was ignored");
    }
    let digest = checkpoint::digest(&dir)?;
    let mut out = json!({
        "checkpoint": dir,
        "kind": manifest.kind,
        "digest": digest,
        "epochs": manifest.epochs_done(),
        "history": manifest.history,
        "metrics": manifest.metrics,
    });
    if a.register {
        let id = a.id.as_deref().expect("clap requires --id with --register");
        std::fs::create_dir_all(home)?;
        let entry = Registry::open(home)?.register(id, manifest.kind, &std::path::absolute(&dir)?)?;
        out["registered"] = serde_json::to_value(entry)?;
    }
    Ok(Some(out))
}
