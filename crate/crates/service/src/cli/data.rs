use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, Subcommand};
use serde::{Deserialize, Serialize};
use steexlab_core::dataset::{build_dataset, ingest_external, IngestOptions};
use steexlab_core::synth::desk_profile;
use steexlab_core::types::Profile;

use super::{load_config, read_config, write_snapshot, Output};

#[derive(Args)]
pub struct Destination {
    /// Dataset id, stored under `<home>/datasets/<id>`.
    #[arg(long, required_unless_present = "out")]
    pub id: Option<String>,
    /// Explicit output directory instead of an id.
    #[arg(long, conflicts_with = "id")]
    pub out: Option<PathBuf>,
}

impl Destination {
    fn dir(&self, home: &Path) -> Result<PathBuf> {
        match (&self.id, &self.out) {
            (_, Some(p)) => Ok(p.clone()),
            (Some(id), None) => {
                steexlab_service::check_id("dataset id", id)?;
                Ok(home.join("datasets").join(id))
            }
            (None, None) => bail!("give --id or --out"),
        }
    }
}

#[derive(Subcommand)]
pub enum DatasetCmd {
    /// Render a synthetic scene dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { count: 2000, seed: 0 }
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub dest: Destination,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn dataset(home: &Path, cmd: DatasetCmd) -> Output {
    let DatasetCmd::Synth(a) = cmd;
    let mut cfg: SynthConfig = load_config(a.config.as_deref())?;
    cfg.count = a.count.unwrap_or(cfg.count);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let dir = a.dest.dir(home)?;
    let ds = build_dataset(cfg.count, cfg.seed, &desk_profile(), &dir)?;
    write_snapshot(&dir, &cfg)?;
    Ok(Some(serde_json::json!({ "dataset": dir, "manifest": ds.manifest })))
}

#[derive(Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub dest: Destination,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub masks: PathBuf,
    /// JSON object keyed by file stem, or a directory of `<stem>.json`.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// Profile JSON; defaults to the synthetic scene profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
}

#[derive(Serialize)]
struct IngestSnapshot<'a> {
    images: &'a Path,
    masks: &'a Path,
    metadata: Option<&'a Path>,
    profile: &'a Profile,
}

pub fn ingest(home: &Path, a: IngestArgs) -> Output {
    let profile = match &a.profile {
        Some(p) => read_config::<Profile>(p)?,
        None => desk_profile(),
    };
    let dir = a.dest.dir(home)?;
    let ds = ingest_external(&a.images, &a.masks, a.metadata.as_deref(), &profile, &IngestOptions::default(), &dir)?;
    write_snapshot(
        &dir,
        &IngestSnapshot { images: &a.images, masks: &a.masks, metadata: a.metadata.as_deref(), profile: &profile },
    )?;
    Ok(Some(serde_json::json!({ "dataset": dir, "manifest": ds.manifest })))
}
