use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use base64::Engine as _;
use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use steexlab_core::dataset::Dataset;
use steexlab_core::engine::{result_digest, save_result, Explainer};
use steexlab_core::types::{CounterClass, CounterfactualRequest, CounterfactualResult, OptimizerConfig, RegionTargetSpec};
use steexlab_service::api::{resolve_regions, DatasetItemRef, ExplainRequest, PngQuery, QuerySource, RegionRef};
use steexlab_service::error::core_detail;
use steexlab_service::pipeline::{execute, prepare, ModelCache};
use steexlab_service::registry::Registry;

use super::{comma_list, load_config, new_run_dir, write_json, write_snapshot, OptimizerFlags, Output};

/// Keys accepted in an explain config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub model: Option<String>,
    pub segmenter: Option<String>,
    pub autoencoder: Option<String>,
    pub counter_class: CounterClass,
    /// `None` frees every class.
    pub target_regions: Option<Vec<RegionRef>>,
    pub optimizer: OptimizerConfig,
}

#[derive(Args, Clone)]
pub struct QueryArgs {
    /// Query image (PNG at the profile resolution).
    #[arg(long, conflicts_with = "dataset")]
    pub image: Option<PathBuf>,
    /// Dataset id under `<home>/datasets`.
    #[arg(long, required_unless_present = "image")]
    pub dataset: Option<String>,
    /// Item index; repeatable.
    #[arg(long = "index", requires = "dataset")]
    pub indices: Vec<usize>,
    /// The first N validation items of the dataset.
    #[arg(long, requires = "dataset", conflicts_with = "indices")]
    pub first: Option<usize>,
}

#[derive(Args, Clone)]
pub struct ModelArgs {
    /// Classifier id.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub segmenter: Option<String>,
    #[arg(long)]
    pub autoencoder: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `auto` or a 1-based class index.
    #[arg(long)]
    pub counter_class: Option<String>,
    #[command(flatten)]
    pub optimizer: OptimizerFlags,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Comma-separated class names or indices, or `all`.
    #[arg(long)]
    pub regions: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub query: QueryArgs,
    #[command(flatten)]
    pub models: ModelArgs,
    /// Region sets separated by `;`, each a comma-separated class list.
    /// Defaults to every class present in the query, one at a time, plus
    /// all of them together.
    #[arg(long)]
    pub sets: Option<String>,
}

/// A query as recorded in the resolved config.
#[derive(Clone, Debug, Serialize)]
#[serde(untagged)]
pub enum QueryRecord {
    Image { image: PathBuf, sha256: String },
    Item { dataset: String, index: usize },
}

fn parse_regions(s: &str) -> Option<Vec<RegionRef>> {
    if s.trim() == "all" {
        return None;
    }
    Some(comma_list(s).into_iter().map(|t| t.parse().map(RegionRef::Index).unwrap_or(RegionRef::Name(t))).collect())
}

fn parse_counter(s: &str) -> Result<CounterClass> {
    if s == "auto" {
        return Ok(CounterClass::Auto);
    }
    Ok(CounterClass::Explicit(s.parse().with_context(|| format!("counter class {s:?} is neither auto nor an index"))?))
}

pub fn resolve_config(m: &ModelArgs, regions: Option<&str>) -> Result<ExplainConfig> {
    let mut cfg: ExplainConfig = load_config(m.config.as_deref())?;
    if m.model.is_some() {
        cfg.model = m.model.clone();
    }
    if m.segmenter.is_some() {
        cfg.segmenter = m.segmenter.clone();
    }
    if m.autoencoder.is_some() {
        cfg.autoencoder = m.autoencoder.clone();
    }
    if let Some(c) = &m.counter_class {
        cfg.counter_class = parse_counter(c)?;
    }
    if let Some(r) = regions {
        cfg.target_regions = parse_regions(r);
    }
    cfg.optimizer = m.optimizer.apply(cfg.optimizer);
    if cfg.model.is_none() {
        bail!("no classifier given: pass --model or set \"model\" in the config");
    }
    Ok(cfg)
}

/// Queries with their API form.
pub fn resolve_queries(home: &Path, q: &QueryArgs) -> Result<Vec<(QueryRecord, QuerySource)>> {
    if let Some(path) = &q.image {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let rec = QueryRecord::Image { image: std::path::absolute(path)?, sha256: hex_digest(&bytes) };
        let src = QuerySource::Png(PngQuery { png_base64: base64::engine::general_purpose::STANDARD.encode(&bytes) });
        return Ok(vec![(rec, src)]);
    }
    let dataset = q.dataset.clone().expect("clap requires --dataset without --image");
    let indices = match q.first {
        Some(n) => {
            let ds = Dataset::load(&home.join("datasets").join(&dataset))?;
            ds.val().into_iter().take(n).map(|i| i.meta.index).collect()
        }
        None if q.indices.is_empty() => vec![0],
        None => q.indices.clone(),
    };
    Ok(indices
        .into_iter()
        .map(|index| {
            (
                QueryRecord::Item { dataset: dataset.clone(), index },
                QuerySource::Item(DatasetItemRef { dataset: dataset.clone(), index }),
            )
        })
        .collect())
}

fn hex_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn request(cfg: &ExplainConfig, query: QuerySource) -> ExplainRequest {
    ExplainRequest {
        model: cfg.model.clone().expect("resolved configs name a model"),
        segmenter: cfg.segmenter.clone(),
        autoencoder: cfg.autoencoder.clone(),
        query,
        counter_class: cfg.counter_class,
        target_regions: cfg.target_regions.clone(),
        optimizer: cfg.optimizer.clone(),
    }
}

fn result_summary(r: &CounterfactualResult, dir: &str) -> Value {
    json!({
        "dir": dir,
        "success": r.success,
        "counter_class": r.counter_class,
        "first_flip_step": r.first_flip_step,
        "query_probs": r.query_probs,
        "final_probs": r.final_probs,
        "delta_norms": r.delta_norms,
        "digest": result_digest(r),
    })
}

#[derive(Serialize)]
struct ExplainSnapshot<'a> {
    config: &'a ExplainConfig,
    queries: Vec<&'a QueryRecord>,
}

pub fn explain(home: &Path, a: ExplainArgs) -> Output {
    let cfg = resolve_config(&a.models, a.regions.as_deref())?;
    let queries = resolve_queries(home, &a.query)?;
    let registry = Registry::open(home)?;
    let cache = ModelCache::default();
    // validate every query before anything is written
    let prepared = queries
        .iter()
        .map(|(_, src)| prepare(home, &registry, &cache, &request(&cfg, src.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let (run_id, run) = new_run_dir(home, "explain", a.models.run_id.as_deref())?;
    write_snapshot(&run, &ExplainSnapshot { config: &cfg, queries: queries.iter().map(|q| &q.0).collect() })?;
    let mut rows = Vec::new();
    for (k, ((rec, _), p)) in queries.iter().zip(&prepared).enumerate() {
        let name = format!("results/{k:03}");
        let r = execute(p)?;
        save_result(&run.join(&name), &r)?;
        let mut row = result_summary(&r, &name);
        row["query"] = serde_json::to_value(rec)?;
        rows.push(row);
    }
    let summary = json!({ "run_id": run_id, "run_dir": run, "results": rows });
    write_json(&run.join("summary.json"), &summary)?;
    Ok(Some(summary))
}

fn parse_sets(s: &str, profile: &steexlab_core::types::Profile) -> Result<Vec<RegionTargetSpec>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| Ok(resolve_regions(parse_regions(t).as_deref(), profile)?))
        .collect()
}

pub fn sweep(home: &Path, a: SweepArgs) -> Output {
    let cfg = resolve_config(&a.models, None)?;
    let mut queries = resolve_queries(home, &a.query)?;
    if queries.len() != 1 {
        bail!("sweep-regions takes exactly one query");
    }
    let (rec, src) = queries.remove(0);
    let registry = Registry::open(home)?;
    let p = prepare(home, &registry, &ModelCache::default(), &request(&cfg, src))?;
    let profile = p.stack.profile.clone();
    let sets = match &a.sets {
        Some(s) => parse_sets(s, &profile)?,
        None => {
            let present = p.stack.segment(&p.image)?.present_classes();
            let mut v: Vec<RegionTargetSpec> =
                present.iter().map(|&c| RegionTargetSpec::new([c], profile.num_classes)).collect::<Result<_, _>>()?;
            v.push(RegionTargetSpec::new(present, profile.num_classes)?);
            v
        }
    };
    let (run_id, run) = new_run_dir(home, "sweep", a.models.run_id.as_deref())?;
    let set_names: Vec<Vec<String>> =
        sets.iter().map(|s| s.classes().iter().map(|&c| profile.class_name(c).to_string()).collect()).collect();
    write_snapshot(&run, &json!({ "config": cfg, "query": rec, "sets": set_names }))?;
    let explainer = Explainer::new(&p.stack, &p.model, p.model_id.clone())?;
    let req = CounterfactualRequest {
        query_image: p.image.clone(),
        counter_class: p.counter_class,
        target_regions: RegionTargetSpec::all(profile.num_classes),
        optimizer: p.optimizer.clone(),
        model_id: p.model_id.clone(),
    };
    let mut rows = Vec::new();
    for (k, (outcome, names)) in explainer.region_targeted_sweep(&req, &sets)?.into_iter().zip(&set_names).enumerate() {
        let mut row = match outcome {
            Ok(r) => {
                let name = format!("results/{k:03}");
                save_result(&run.join(&name), &r)?;
                result_summary(&r, &name)
            }
            Err(e) => json!({ "error": core_detail(&e) }),
        };
        row["regions"] = json!(names);
        rows.push(row);
    }
    let summary = json!({ "run_id": run_id, "run_dir": run, "query": rec, "results": rows });
    write_json(&run.join("summary.json"), &summary)?;
    Ok(Some(summary))
}
