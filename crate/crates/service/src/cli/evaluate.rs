use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;
use steexlab_core::checkpoint::ModelKind;
use steexlab_core::dataset::{Dataset, Item};
use steexlab_core::decision::DecisionModel;
use steexlab_core::engine::{load_result, Explainer, RESULT_JSON};
use steexlab_core::eval::report::{conditions_table, impact_text, items_csv, sweep_table};
use steexlab_core::eval::{
    ablation_suite, fingerprint, impact_table, lambda_sweep as run_lambda_sweep, reconstruction_report, run_queries,
    success_rate, summarize, AttributeOracle, EvalTools, IdentityEmbedder, MaskSource,
};
use steexlab_core::types::{CounterfactualResult, OptimizerConfig, RegionTargetSpec};
use steexlab_service::pipeline::ModelCache;
use steexlab_service::registry::Registry;

use super::{comma_list, dir_or_id, new_run_dir, write_json, write_snapshot, OptimizerFlags, Output};

#[derive(Args)]
pub struct ToolArgs {
    /// Identity embedder id, for identity preservation.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Attribute oracle id, for attribute changes and the Fréchet distance.
    #[arg(long)]
    pub oracle: Option<String>,
}

struct Tools {
    embedder: Option<IdentityEmbedder>,
    oracle: Option<AttributeOracle>,
}

impl Tools {
    fn load(registry: &Registry, a: &ToolArgs) -> Result<Self> {
        let embedder = match &a.embedder {
            Some(id) => Some(IdentityEmbedder::load(&registry.checkpoint_path(&registry.require(id, ModelKind::Embedder)?))?.0),
            None => None,
        };
        let oracle = match &a.oracle {
            Some(id) => Some(AttributeOracle::load(&registry.checkpoint_path(&registry.require(id, ModelKind::Oracle)?))?.0),
            None => None,
        };
        Ok(Tools { embedder, oracle })
    }

    fn view(&self) -> EvalTools<'_> {
        EvalTools { embedder: self.embedder.as_ref(), oracle: self.oracle.as_ref() }
    }
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Directory searched recursively for stored results.
    #[arg(long)]
    pub results: PathBuf,
    #[command(flatten)]
    pub tools: ToolArgs,
    #[arg(long)]
    pub run_id: Option<String>,
}

fn find_results(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(RESULT_JSON).is_file() {
        out.push(dir.to_path_buf());
        return Ok(());
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for d in subdirs {
        find_results(&d, out)?;
    }
    Ok(())
}

pub fn evaluate(home: &Path, a: EvaluateArgs) -> Output {
    let root = if a.results.exists() { a.results.clone() } else { home.join(&a.results) };
    let mut dirs = Vec::new();
    find_results(&root, &mut dirs)?;
    if dirs.is_empty() {
        bail!("no results under {}", root.display());
    }
    let results = dirs.iter().map(|d| load_result(d)).collect::<Result<Vec<_>, _>>()?;
    let registry = Registry::open(home)?;
    let tools = Tools::load(&registry, &a.tools)?;
    let (run_id, run) = new_run_dir(home, "evaluate", a.run_id.as_deref())?;
    write_snapshot(&run, &json!({ "results": std::path::absolute(&root)?, "embedder": a.tools.embedder, "oracle": a.tools.oracle }))?;
    let configs: Vec<&OptimizerConfig> = results.iter().map(|r| &r.optimizer).collect();
    let success = success_rate(&results)?.with_fingerprint(&fingerprint(&configs)).with_breakdown("items.csv");
    let summary = summarize("results", &results, tools.view())?;
    std::fs::write(run.join("items.csv"), items_csv(&summary.items))?;
    let report = json!({
        "run_id": run_id,
        "results_dir": root,
        "result_dirs": dirs,
        "success_rate": success,
        "summary": summary,
        "reconstruction": reconstruction_report(&results, tools.view())?,
    });
    write_json(&run.join("report.json"), &report)?;
    Ok(Some(report))
}

#[derive(Args)]
pub struct BatchArgs {
    /// Dataset id or directory; its first validation items are the queries.
    #[arg(long)]
    pub dataset: String,
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    #[arg(long)]
    pub segmenter: Option<String>,
    #[arg(long)]
    pub autoencoder: Option<String>,
    #[command(flatten)]
    pub optimizer: OptimizerFlags,
    #[command(flatten)]
    pub tools: ToolArgs,
    #[arg(long)]
    pub run_id: Option<String>,
}

struct Batch {
    registry: Registry,
    cache: ModelCache,
    dataset: Dataset,
    optimizer: OptimizerConfig,
}

impl Batch {
    fn open(home: &Path, a: &BatchArgs) -> Result<Self> {
        let dataset = Dataset::load(&dir_or_id(home, "datasets", &a.dataset))?;
        Ok(Batch {
            registry: Registry::open(home)?,
            cache: ModelCache::default(),
            dataset,
            optimizer: a.optimizer.apply(OptimizerConfig::default()),
        })
    }

    fn items(&self, count: usize) -> Vec<&Item> {
        self.dataset.val().into_iter().take(count).collect()
    }

    fn stack(&self, a: &BatchArgs) -> Result<std::sync::Arc<steexlab_core::autoencoder::SemanticStack>> {
        let seg = self.registry.require_or_single(a.segmenter.as_deref(), ModelKind::Segmenter)?;
        let ae = self.registry.require_or_single(a.autoencoder.as_deref(), ModelKind::Autoencoder)?;
        Ok(self.cache.stack(&self.registry, &seg, &ae)?)
    }

    fn classifier(&self, id: &str) -> Result<std::sync::Arc<DecisionModel>> {
        Ok(self.cache.classifier(&self.registry, &self.registry.require(id, ModelKind::Classifier)?)?)
    }
}

#[derive(Args)]
pub struct AblateArgs {
    /// Classifier id.
    #[arg(long)]
    pub model: String,
    #[command(flatten)]
    pub batch: BatchArgs,
}

pub fn ablate(home: &Path, a: AblateArgs) -> Output {
    let b = Batch::open(home, &a.batch)?;
    let stack = b.stack(&a.batch)?;
    let model = b.classifier(&a.model)?;
    let tools = Tools::load(&b.registry, &a.batch.tools)?;
    let explainer = Explainer::new(&stack, &model, a.model.clone())?;
    let items = b.items(a.batch.count);
    let (run_id, run) = new_run_dir(home, "ablate", a.batch.run_id.as_deref())?;
    write_snapshot(&run, &json!({ "model": a.model, "dataset": a.batch.dataset, "count": items.len(), "optimizer": b.optimizer }))?;
    let rows = ablation_suite(&explainer, &items, &b.optimizer, tools.view(), true)?;
    for r in &rows {
        std::fs::write(run.join(format!("items-{}.csv", r.name)), items_csv(&r.items))?;
    }
    std::fs::write(run.join("conditions.txt"), conditions_table(&rows))?;
    write_json(&run.join("conditions.json"), &rows)?;
    Ok(Some(json!({ "run_id": run_id, "run_dir": run, "conditions": rows })))
}

#[derive(Args)]
pub struct LambdaSweepArgs {
    #[arg(long)]
    pub model: String,
    /// Comma-separated distance weights.
    #[arg(long, default_value = "0,0.1,0.3,1")]
    pub lambdas: String,
    #[command(flatten)]
    pub batch: BatchArgs,
}

pub fn lambda_sweep(home: &Path, a: LambdaSweepArgs) -> Output {
    let lambdas = comma_list(&a.lambdas)
        .iter()
        .map(|t| t.parse::<f64>().with_context(|| format!("lambda {t:?} is not a number")))
        .collect::<Result<Vec<_>>>()?;
    let b = Batch::open(home, &a.batch)?;
    let stack = b.stack(&a.batch)?;
    let model = b.classifier(&a.model)?;
    let tools = Tools::load(&b.registry, &a.batch.tools)?;
    let explainer = Explainer::new(&stack, &model, a.model.clone())?;
    let items = b.items(a.batch.count);
    let (run_id, run) = new_run_dir(home, "lambda-sweep", a.batch.run_id.as_deref())?;
    write_snapshot(
        &run,
        &json!({ "model": a.model, "dataset": a.batch.dataset, "count": items.len(), "lambdas": lambdas, "optimizer": b.optimizer }),
    )?;
    let points = run_lambda_sweep(&explainer, &items, &lambdas, &b.optimizer, tools.view())?;
    std::fs::write(run.join("sweep.txt"), sweep_table(&points))?;
    write_json(&run.join("sweep.json"), &points)?;
    Ok(Some(json!({ "run_id": run_id, "run_dir": run, "points": points })))
}

#[derive(Args)]
pub struct ImpactArgs {
    /// Comma-separated classifier ids, at least two.
    #[arg(long)]
    pub models: String,
    #[command(flatten)]
    pub batch: BatchArgs,
}

pub fn impact(home: &Path, a: ImpactArgs) -> Output {
    let ids = comma_list(&a.models);
    let b = Batch::open(home, &a.batch)?;
    let stack = b.stack(&a.batch)?;
    let items = b.items(a.batch.count);
    let models = ids.iter().map(|id| b.classifier(id)).collect::<Result<Vec<_>>>()?;
    let (run_id, run) = new_run_dir(home, "impact-table", a.batch.run_id.as_deref())?;
    write_snapshot(&run, &json!({ "models": ids, "dataset": a.batch.dataset, "count": items.len(), "optimizer": b.optimizer }))?;
    let all = RegionTargetSpec::all(stack.profile.num_classes);
    let mut results: Vec<Vec<CounterfactualResult>> = Vec::new();
    for (id, m) in ids.iter().zip(&models) {
        let explainer = Explainer::new(&stack, m, id.clone())?;
        results.push(run_queries(&explainer, &items, &all, &b.optimizer, MaskSource::Predicted)?);
    }
    let runs: Vec<(String, &[CounterfactualResult])> = ids.iter().cloned().zip(results.iter().map(Vec::as_slice)).collect();
    let table = impact_table(&runs, &stack.profile.class_names)?;
    std::fs::write(run.join("impact.txt"), impact_text(&table))?;
    write_json(&run.join("impact.json"), &table)?;
    Ok(Some(json!({ "run_id": run_id, "run_dir": run, "table": table })))
}
