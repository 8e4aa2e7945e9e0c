use serde::{Deserialize, Serialize};

use super::metrics::{
    attribute_changes, cosine_similarities, frechet_distance, query_pairs, reconstruction_pairs, FID_MIN_SAMPLES,
};
use super::proxies::{AttributeOracle, IdentityEmbedder};
use super::IDENTITY_THRESHOLD;
use crate::autoencoder::{dataset_miou, SemanticStack};
use crate::dataset::Item;
use crate::engine::{decision_loss, Explainer};
use crate::error::{Error, Result};
use crate::types::{CounterClass, CounterfactualResult, ImageTensor, OptimizerConfig, RegionTargetSpec, SemanticMask};

/// Optional evaluation networks; metrics needing a missing one are skipped.
#[derive(Clone, Copy, Default)]
pub struct EvalTools<'a> {
    pub embedder: Option<&'a IdentityEmbedder>,
    pub oracle: Option<&'a AttributeOracle>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    Predicted,
    GroundTruth,
}

/// Untargeted counterfactuals for each item, in order.
pub fn run_queries(
    explainer: &Explainer,
    items: &[&Item],
    targets: &RegionTargetSpec,
    cfg: &OptimizerConfig,
    masks: MaskSource,
) -> Result<Vec<CounterfactualResult>> {
    items
        .iter()
        .map(|it| {
            let d = match masks {
                MaskSource::Predicted => explainer.decompose(&it.image)?,
                MaskSource::GroundTruth => explainer.decompose_with_mask(&it.image, it.mask.clone())?,
            };
            explainer.explain_decomposed(&d, CounterClass::Auto, targets, cfg)
        })
        .collect()
}

/// Per-item values behind a condition summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItemRow {
    pub index: usize,
    pub success: bool,
    pub counter_prob: f64,
    pub first_flip_step: Option<usize>,
    pub squared_displacement: f64,
    pub objective_decreased: bool,
    pub identity_similarity: Option<f64>,
    pub attributes_changed: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSummary {
    pub name: String,
    pub count: usize,
    pub success_rate: f64,
    pub mean_squared_displacement: f64,
    /// Fraction of runs whose final objective is at most the initial one.
    pub objective_decrease_rate: f64,
    pub identity_preservation: Option<f64>,
    pub attributes_changed: Option<f64>,
    pub desk_fid: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
    #[serde(skip)]
    pub items: Vec<ItemRow>,
}

/// Total objective at the final codes, from the stored result.
pub fn final_objective(r: &CounterfactualResult) -> f64 {
    decision_loss(&r.final_probs, r.counter_class) + r.optimizer.lambda * r.squared_displacement()
}

pub fn initial_objective(r: &CounterfactualResult) -> f64 {
    let s = &r.loss_trajectory[0];
    s.decision_loss + r.optimizer.lambda * s.distance_loss
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores a set of (reference, candidate) image pairs with the available tools.
fn pair_metrics(
    pairs: &[(&ImageTensor, &ImageTensor)],
    tools: EvalTools,
    notices: &mut Vec<String>,
) -> Result<(Option<Vec<f64>>, Option<Vec<usize>>, Option<f64>)> {
    let sims = tools.embedder.map(|e| cosine_similarities(e, pairs));
    let changes = tools.oracle.map(|o| attribute_changes(o, pairs));
    let fid = match tools.oracle {
        Some(o) if pairs.len() >= FID_MIN_SAMPLES => {
            let a = o.features(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
            let b = o.features(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
            let fd = frechet_distance(&a, &b)?;
            if fd.regularized {
                notices.push("desk-FID covariance regularized".into());
            }
            Some(fd.value)
        }
        Some(_) => {
            notices.push(format!("desk-FID skipped: fewer than {FID_MIN_SAMPLES} samples"));
            None
        }
        None => None,
    };
    if tools.embedder.is_none() {
        notices.push("identity preservation skipped: no embedder".into());
    }
    if tools.oracle.is_none() {
        notices.push("attribute changes and desk-FID skipped: no oracle".into());
    }
    Ok((sims, changes, fid))
}

pub fn summarize(name: &str, results: &[CounterfactualResult], tools: EvalTools) -> Result<ConditionSummary> {
    if results.is_empty() {
        return Err(Error::Precondition(format!("{name}: no results to summarize")));
    }
    let mut notices = Vec::new();
    let (sims, changes, fid) = pair_metrics(&query_pairs(results), tools, &mut notices)?;
    let items: Vec<ItemRow> = results
        .iter()
        .enumerate()
        .map(|(i, r)| ItemRow {
            index: i,
            success: r.success,
            counter_prob: r.final_probs[r.counter_class - 1],
            first_flip_step: r.first_flip_step,
            squared_displacement: r.squared_displacement(),
            objective_decreased: final_objective(r) <= initial_objective(r),
            identity_similarity: sims.as_ref().map(|s| s[i]),
            attributes_changed: changes.as_ref().map(|c| c[i]),
        })
        .collect();
    Ok(ConditionSummary {
        name: name.into(),
        count: results.len(),
        success_rate: mean(items.iter().map(|r| f64::from(u8::from(r.success)))),
        mean_squared_displacement: mean(items.iter().map(|r| r.squared_displacement)),
        objective_decrease_rate: mean(items.iter().map(|r| f64::from(u8::from(r.objective_decreased)))),
        identity_preservation: sims.map(|s| mean(s.iter().map(|&v| f64::from(u8::from(v > IDENTITY_THRESHOLD))))),
        attributes_changed: changes.map(|c| mean(c.iter().map(|&v| v as f64))),
        desk_fid: fid,
        notices,
        items,
    })
}

/// Mean per-class IoU between the segmentation of each counterfactual and
/// the layout it was generated from, accumulated over the whole set.
pub fn layout_preservation(stack: &SemanticStack, results: &[CounterfactualResult]) -> Result<f64> {
    let mut pairs = Vec::with_capacity(results.len());
    for r in results {
        pairs.push((stack.segment(&r.counterfactual_image)?, &r.mask));
    }
    Ok(dataset_miou(&pairs))
}

/// Full method, no distance term, and ground-truth masks.
pub fn ablation_suite(
    explainer: &Explainer,
    items: &[&Item],
    cfg: &OptimizerConfig,
    tools: EvalTools,
    ground_truth_available: bool,
) -> Result<Vec<ConditionSummary>> {
    let all = RegionTargetSpec::all(explainer.stack.profile.num_classes);
    let full = run_queries(explainer, items, &all, cfg, MaskSource::Predicted)?;
    let no_dist = OptimizerConfig { lambda: 0.0, ..cfg.clone() };
    let free = run_queries(explainer, items, &all, &no_dist, MaskSource::Predicted)?;
    let mut out = vec![summarize("full", &full, tools)?, summarize("no_distance", &free, tools)?];
    if ground_truth_available {
        let gt = run_queries(explainer, items, &all, cfg, MaskSource::GroundTruth)?;
        out.push(summarize("ground_truth_masks", &gt, tools)?);
    } else {
        out[0].notices.push("ground-truth mask condition skipped: dataset has no ground-truth masks".into());
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPoint {
    pub lambda: f64,
    pub summary: ConditionSummary,
}

pub fn lambda_sweep(
    explainer: &Explainer,
    items: &[&Item],
    lambdas: &[f64],
    cfg: &OptimizerConfig,
    tools: EvalTools,
) -> Result<Vec<SweepPoint>> {
    let all = RegionTargetSpec::all(explainer.stack.profile.num_classes);
    lambdas
        .iter()
        .map(|&lambda| {
            let c = OptimizerConfig { lambda, ..cfg.clone() };
            let results = run_queries(explainer, items, &all, &c, MaskSource::Predicted)?;
            Ok(SweepPoint { lambda, summary: summarize(&format!("lambda={lambda}"), &results, tools)? })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructionSummary {
    pub count: usize,
    pub mean_abs_error: f64,
    pub identity_preservation: Option<f64>,
    pub attributes_changed: Option<f64>,
    pub desk_fid: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notices: Vec<String>,
}

/// Metrics between queries and their reconstructions: the ceiling for any
/// counterfactual generated from them.
pub fn reconstruction_report(results: &[CounterfactualResult], tools: EvalTools) -> Result<ReconstructionSummary> {
    if results.is_empty() {
        return Err(Error::Precondition("no results to evaluate".into()));
    }
    let pairs = reconstruction_pairs(results);
    let mut notices = Vec::new();
    let (sims, changes, fid) = pair_metrics(&pairs, tools, &mut notices)?;
    Ok(ReconstructionSummary {
        count: results.len(),
        mean_abs_error: mean(pairs.iter().map(|(a, b)| a.mean_abs_diff(b))),
        identity_preservation: sims.map(|s| mean(s.iter().map(|&v| f64::from(u8::from(v > IDENTITY_THRESHOLD))))),
        attributes_changed: changes.map(|c| mean(c.iter().map(|&v| v as f64))),
        desk_fid: fid,
        notices,
    })
}

/// Reconstruction metrics for bare items, without running any search.
pub fn reconstruct_items(stack: &SemanticStack, items: &[&Item], masks: MaskSource) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    items
        .iter()
        .map(|it| {
            let mask: SemanticMask = match masks {
                MaskSource::Predicted => stack.segment(&it.image)?,
                MaskSource::GroundTruth => it.mask.clone(),
            };
            let (_, rec) = stack.autoencoder.reconstruct(&it.image, &mask)?;
            Ok((it.image.clone(), rec))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpactTable {
    pub models: Vec<String>,
    pub class_names: Vec<String>,
    /// `mean_norm[m][c]`: mean ‖δ_c‖ of model `m` over queries containing `c`.
    pub mean_norm: Vec<Vec<Option<f64>>>,
    /// `relative[m][c]`: `mean_norm[m][c]` over the cross-model mean for `c`.
    pub relative: Vec<Vec<Option<f64>>>,
    /// Classes excluded because they never occur or are never changed.
    pub excluded: Vec<String>,
    /// Per model, class names from most to least impactful.
    pub ranking: Vec<Vec<String>>,
}

impl ImpactTable {
    pub fn rank_of(&self, model: usize, class: &str) -> Option<usize> {
        self.ranking[model].iter().position(|c| c == class)
    }
}

/// Relative per-class code displacement of each model's counterfactuals.
pub fn impact_table(runs: &[(String, &[CounterfactualResult])], class_names: &[String]) -> Result<ImpactTable> {
    if runs.len() < 2 {
        return Err(Error::Precondition("impact table needs at least two models".into()));
    }
    let n = class_names.len();
    let mean_norm: Vec<Vec<Option<f64>>> = runs
        .iter()
        .map(|(_, results)| {
            (0..n)
                .map(|c| {
                    let v: Vec<f64> =
                        results.iter().filter(|r| r.original_codes.present()[c]).map(|r| r.delta_norms[c]).collect();
                    (!v.is_empty()).then(|| mean(v))
                })
                .collect()
        })
        .collect();
    let mut relative = vec![vec![None; n]; runs.len()];
    let mut excluded = Vec::new();
    for c in 0..n {
        let vals: Vec<f64> = mean_norm.iter().filter_map(|m| m[c]).collect();
        let avg = mean(vals.iter().copied());
        if vals.len() < runs.len() || !(avg > 0.0) {
            excluded.push(class_names[c].clone());
            continue;
        }
        for m in 0..runs.len() {
            relative[m][c] = mean_norm[m][c].map(|v| v / avg);
        }
    }
    let ranking = relative
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).filter(|&c| row[c].is_some()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite impacts").then(a.cmp(&b)));
            idx.into_iter().map(|c| class_names[c].clone()).collect()
        })
        .collect();
    Ok(ImpactTable {
        models: runs.iter().map(|(m, _)| m.clone()).collect(),
        class_names: class_names.to_vec(),
        mean_norm,
        relative,
        excluded,
        ranking,
    })
}
