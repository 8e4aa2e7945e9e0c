//! Registered checkpoints, keyed by model id and persisted in
//! `<home>/registry.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use arc_swap::ArcSwap;
use serde::{Deserialize, Serialize};
use steexlab_core::checkpoint::{self, ModelKind};
use steexlab_core::types::Profile;

use crate::error::{Result, ServiceError};
use crate::{check_id, read_json, write_json_atomic};

pub const REGISTRY_FILE: &str = "registry.json";
const REGISTRY_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredEntry {
    id: String,
    kind: ModelKind,
    checkpoint: PathBuf,
    digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    format_version: u32,
    models: Vec<StoredEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Ready,
    Invalid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub id: String,
    pub kind: ModelKind,
    /// Path as registered; relative paths are taken from the home directory.
    pub checkpoint: PathBuf,
    /// Digest recorded at registration.
    pub digest: String,
    pub status: ModelStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<Profile>,
}

impl ModelEntry {
    fn stored(&self) -> StoredEntry {
        StoredEntry {
            id: self.id.clone(),
            kind: self.kind,
            checkpoint: self.checkpoint.clone(),
            digest: self.digest.clone(),
        }
    }
}

/// Reads go through an atomically swapped snapshot; writers serialize on a
/// mutex and persist before publishing.
pub struct Registry {
    home: PathBuf,
    entries: ArcSwap<BTreeMap<String, ModelEntry>>,
    write: Mutex<()>,
}

fn resolve(home: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        home.join(p)
    }
}

/// Reads the manifest and current digest of a checkpoint directory.
fn inspect(dir: &Path, kind: ModelKind) -> std::result::Result<(Profile, String), String> {
    let m = checkpoint::load_manifest(dir).map_err(|e| e.to_string())?;
    if m.kind != kind {
        return Err(format!("{} holds a {} checkpoint, not a {}", dir.display(), m.kind.as_str(), kind.as_str()));
    }
    let digest = checkpoint::digest(dir).map_err(|e| e.to_string())?;
    Ok((m.profile, digest))
}

fn verify(home: &Path, s: StoredEntry) -> ModelEntry {
    let (status, reason, profile) = match inspect(&resolve(home, &s.checkpoint), s.kind) {
        Ok((profile, digest)) if digest == s.digest => (ModelStatus::Ready, None, Some(profile)),
        Ok((profile, digest)) => (
            ModelStatus::Invalid,
            Some(format!("checkpoint digest {digest} differs from the registered {}", s.digest)),
            Some(profile),
        ),
        Err(e) => (ModelStatus::Invalid, Some(e), None),
    };
    ModelEntry { id: s.id, kind: s.kind, checkpoint: s.checkpoint, digest: s.digest, status, reason, profile }
}

impl Registry {
    /// Loads the registry, checking every checkpoint against its recorded
    /// digest. Mismatching entries stay listed but are marked invalid.
    pub fn open(home: &Path) -> Result<Self> {
        let file = home.join(REGISTRY_FILE);
        let stored = if file.exists() {
            let f: RegistryFile = read_json(&file)?;
            if f.format_version != REGISTRY_VERSION {
                return Err(ServiceError::Internal(format!("unsupported registry format {}", f.format_version)));
            }
            f.models
        } else {
            Vec::new()
        };
        let entries = stored.into_iter().map(|s| (s.id.clone(), verify(home, s))).collect();
        Ok(Registry { home: home.to_path_buf(), entries: ArcSwap::from_pointee(entries), write: Mutex::new(()) })
    }

    pub fn snapshot(&self) -> Arc<BTreeMap<String, ModelEntry>> {
        self.entries.load_full()
    }

    pub fn get(&self, id: &str) -> Option<ModelEntry> {
        self.entries.load().get(id).cloned()
    }

    pub fn checkpoint_path(&self, entry: &ModelEntry) -> PathBuf {
        resolve(&self.home, &entry.checkpoint)
    }

    pub fn register(&self, id: &str, kind: ModelKind, checkpoint: &Path) -> Result<ModelEntry> {
        check_id("model id", id)?;
        let _guard = self.write.lock().expect("registry writer poisoned");
        let current = self.entries.load_full();
        if current.contains_key(id) {
            return Err(ServiceError::Conflict(format!("model id {id:?} is already registered")));
        }
        let (profile, digest) = inspect(&resolve(&self.home, checkpoint), kind).map_err(ServiceError::BadRequest)?;
        let entry = ModelEntry {
            id: id.into(),
            kind,
            checkpoint: checkpoint.to_path_buf(),
            digest,
            status: ModelStatus::Ready,
            reason: None,
            profile: Some(profile),
        };
        let mut next = (*current).clone();
        next.insert(id.into(), entry.clone());
        let file = RegistryFile { format_version: REGISTRY_VERSION, models: next.values().map(ModelEntry::stored).collect() };
        write_json_atomic(&self.home.join(REGISTRY_FILE), &file)?;
        self.entries.store(Arc::new(next));
        Ok(entry)
    }

    /// A ready entry of the given kind.
    pub fn require(&self, id: &str, kind: ModelKind) -> Result<ModelEntry> {
        let e = self.get(id).ok_or_else(|| ServiceError::BadRequest(format!("unknown model {id:?}")))?;
        if e.kind != kind {
            return Err(ServiceError::BadRequest(format!("model {id:?} is a {}, not a {}", e.kind.as_str(), kind.as_str())));
        }
        if e.status != ModelStatus::Ready {
            return Err(ServiceError::InvalidModel(format!(
                "model {id:?} is invalid: {}",
                e.reason.as_deref().unwrap_or("unknown reason")
            )));
        }
        Ok(e)
    }

    /// The named model, or the only registered model of that kind.
    pub fn require_or_single(&self, id: Option<&str>, kind: ModelKind) -> Result<ModelEntry> {
        if let Some(id) = id {
            return self.require(id, kind);
        }
        let snap = self.snapshot();
        let mut of_kind = snap.values().filter(|e| e.kind == kind);
        match (of_kind.next(), of_kind.next()) {
            (Some(e), None) => self.require(&e.id, kind),
            (None, _) => Err(ServiceError::BadRequest(format!("no {} is registered", kind.as_str()))),
            (Some(_), Some(_)) => Err(ServiceError::BadRequest(format!(
                "several {}s are registered; name one explicitly",
                kind.as_str()
            ))),
        }
    }
}
