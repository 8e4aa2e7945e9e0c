pub mod data;
pub mod evaluate;
pub mod explain;
pub mod train;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use steexlab_core::checkpoint::ModelKind;
use steexlab_core::types::OptimizerConfig;
use steexlab_service::api::ModelList;
use steexlab_service::jobs::now_ms;
use steexlab_service::registry::Registry;
use steexlab_service::server::{default_workers, serve as serve_http, AppState};
use steexlab_service::{write_json_atomic, DEFAULT_PORT, PORT_ENV};

pub type Output = Result<Option<Value>>;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

/// Reads a JSON config file; unknown keys are errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), read_config)
}

pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("invalid config {}", path.display()))
}

/// Creates a fresh run directory under `<home>/runs`; existing runs are
/// never reused.
pub fn new_run_dir(home: &Path, command: &str, run_id: Option<&str>) -> Result<(String, PathBuf)> {
    let id = run_id.map(str::to_string).unwrap_or_else(|| format!("{command}-{}", now_ms()));
    steexlab_service::check_id("run id", &id)?;
    let dir = home.join("runs").join(&id);
    if dir.exists() {
        bail!("run directory {} already exists; choose another --run-id", dir.display());
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok((id, dir))
}

pub fn write_snapshot<T: Serialize>(dir: &Path, value: &T) -> Result<()> {
    Ok(write_json_atomic(&dir.join(RESOLVED_CONFIG), value)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(write_json_atomic(path, value)?)
}

/// A directory path, or an id under `<home>/<sub>`.
pub fn dir_or_id(home: &Path, sub: &str, arg: &str) -> PathBuf {
    let p = PathBuf::from(arg);
    if p.is_dir() {
        p
    } else {
        home.join(sub).join(arg)
    }
}

/// Optimizer settings given on the command line override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct OptimizerFlags {
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl OptimizerFlags {
    pub fn apply(&self, mut cfg: OptimizerConfig) -> OptimizerConfig {
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.steps {
            cfg.num_steps = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg
    }
}

pub fn comma_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(str::to_string).collect()
}

#[derive(Subcommand)]
pub enum ModelsCmd {
    /// List registered models with their status.
    List,
    /// Register a checkpoint directory under an id.
    Register {
        id: String,
        #[arg(long)]
        kind: ModelKind,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

pub fn models(home: &Path, cmd: ModelsCmd) -> Output {
    std::fs::create_dir_all(home).with_context(|| format!("creating {}", home.display()))?;
    let registry = Registry::open(home)?;
    match cmd {
        ModelsCmd::List => Ok(Some(serde_json::to_value(ModelList {
            models: registry.snapshot().values().cloned().collect(),
        })?)),
        ModelsCmd::Register { id, kind, checkpoint } => {
            let checkpoint = std::path::absolute(&checkpoint)?;
            Ok(Some(serde_json::to_value(registry.register(&id, kind, &checkpoint)?)?))
        }
    }
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, env = PORT_ENV, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: IpAddr,
    /// Concurrent explain jobs; defaults to the number of cores minus one.
    #[arg(long)]
    pub workers: Option<usize>,
}

pub fn serve(home: &Path, args: ServeArgs) -> Output {
    let workers = args.workers.unwrap_or_else(default_workers);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let state = AppState::open(home, workers)?;
        let addr = SocketAddr::new(args.bind, args.port);
        eprintln!("serving {} on http://{addr} with {workers} worker(s)", home.display());
        serve_http(state, addr).await?;
        Ok(None)
    })
}
