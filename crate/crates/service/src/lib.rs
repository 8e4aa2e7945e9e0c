//! HTTP job service, model registry and command-line front end over
//! `steexlab-core`.

pub mod api;
pub mod error;
pub mod jobs;
pub mod pipeline;
pub mod registry;
pub mod schema;
pub mod server;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{ErrorDetail, Result, ServiceError};

pub const HOME_ENV: &str = "STEEXLAB_HOME";
pub const PORT_ENV: &str = "STEEXLAB_PORT";
pub const DEFAULT_PORT: u16 = 8080;

/// Ids name directories, so they are restricted to a safe alphabet.
pub fn check_id(what: &str, id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("{what} {id:?} must be 1-64 characters of [A-Za-z0-9._-] not starting with '.'")))
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| ServiceError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))
}

/// Writes through a temporary file and a rename.
pub fn write_json_atomic<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| ServiceError::Internal(e.to_string()))?;
    bytes.push(b'\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, bytes).map_err(|e| ServiceError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| ServiceError::io(path, e))
}
