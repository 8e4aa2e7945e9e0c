//! Model checkpoints: a directory holding `manifest.json` and
//! `weights.safetensors`, plus `train_state.safetensors` while a training
//! run can still be resumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Visibility;
use crate::nn::NamedTensors;
use crate::types::Profile;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.safetensors";
pub const TRAIN_STATE: &str = "train_state.safetensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Segmenter,
    Autoencoder,
    Classifier,
    Embedder,
    Oracle,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Segmenter => "segmenter",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Classifier => "classifier",
            ModelKind::Embedder => "embedder",
            ModelKind::Oracle => "oracle",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Config(format!("unknown model kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub profile: Profile,
    /// Architecture and head description, kind-specific.
    pub arch: serde_json::Value,
    pub dataset_fingerprint: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility: Option<Visibility>,
    /// Resolved training configuration.
    pub training: serde_json::Value,
    pub history: Vec<EpochLog>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, f64>,
    pub weights_sha256: String,
}

impl CheckpointManifest {
    pub fn epochs_done(&self) -> usize {
        self.history.len()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes weights first and the manifest last, so a crash never leaves a
/// manifest pointing at missing weights.
pub fn save(dir: &Path, manifest: &mut CheckpointManifest, weights: &NamedTensors, train_state: Option<&NamedTensors>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = weights.to_safetensors()?;
    manifest.weights_sha256 = sha256_hex(&bytes);
    write_atomic(&dir.join(WEIGHTS), &bytes)?;
    let state_path = dir.join(TRAIN_STATE);
    match train_state {
        Some(s) => write_atomic(&state_path, &s.to_safetensors()?)?,
        None if state_path.exists() => fs::remove_file(&state_path).map_err(|e| Error::io(&state_path, e))?,
        None => {}
    }
    let mut json = serde_json::to_vec_pretty(manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format_version)));
    }
    Ok(m)
}

/// Loads manifest and weights, verifying the weight hash.
pub fn load(dir: &Path, kind: ModelKind) -> Result<(CheckpointManifest, NamedTensors)> {
    let m = load_manifest(dir)?;
    if m.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} model, expected {}",
            dir.display(),
            m.kind.as_str(),
            kind.as_str()
        )));
    }
    let path = dir.join(WEIGHTS);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != m.weights_sha256 {
        return Err(Error::Checkpoint(format!("{}: weights do not match manifest hash", path.display())));
    }
    Ok((m, NamedTensors::from_safetensors(&bytes)?))
}

pub fn load_train_state(dir: &Path) -> Result<Option<NamedTensors>> {
    let path = dir.join(TRAIN_STATE);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(Some(NamedTensors::from_safetensors(&bytes)?))
}

/// Digest over the manifest and weight bytes; the registry's integrity key.
pub fn digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST, WEIGHTS] {
        let path = dir.join(name);
        h.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}
