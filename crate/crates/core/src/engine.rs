//! Counterfactual search: style codes are optimized with Adam under a fixed
//! semantic layout until the frozen classifier prefers the counter class.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::SemanticStack;
use crate::decision::DecisionModel;
use crate::error::{Error, Result};
use crate::models::{Backbone, BackboneTape, Generator, GeneratorTape, LayoutFeatures};
use crate::nn::{AdamConfig, AdamState, Map, Scalar};
use crate::pngio;
use crate::types::{
    CounterClass, CounterfactualRequest, CounterfactualResult, ImageTensor, OptimizerConfig, RegionTargetSpec,
    SemanticMask, StyleCodeSet, TrajectoryStep,
};

/// Probabilities below this are clamped inside the decision loss.
pub const PROB_FLOOR: f64 = 1e-12;
pub const SUCCESS_THRESHOLD: f64 = 0.5;

/// `-ln P(y)` with `P(y)` clamped at [`PROB_FLOOR`]; `y` is 1-based.
pub fn decision_loss(probs: &[f64], y: usize) -> f64 {
    -probs[y - 1].max(PROB_FLOOR).ln()
}

/// Sum over all classes of the squared code displacement.
pub fn distance_loss(original: &StyleCodeSet, current: &StyleCodeSet) -> Result<f64> {
    check_same_shape(original, current)?;
    Ok(original.values().iter().zip(current.values()).map(|(a, b)| ((a - b) as f64).powi(2)).sum())
}

/// Same sum restricted to the classes in `targets`.
pub fn distance_loss_over(original: &StyleCodeSet, current: &StyleCodeSet, targets: &RegionTargetSpec) -> Result<f64> {
    check_same_shape(original, current)?;
    Ok(targets
        .classes()
        .iter()
        .map(|&c| original.code(c).iter().zip(current.code(c)).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>())
        .sum())
}

fn check_same_shape(a: &StyleCodeSet, b: &StyleCodeSet) -> Result<()> {
    if a.num_classes() != b.num_classes() || a.code_dim() != b.code_dim() {
        return Err(Error::Shape(format!(
            "code sets are {}×{} and {}×{}",
            a.num_classes(),
            a.code_dim(),
            b.num_classes(),
            b.code_dim()
        )));
    }
    Ok(())
}

/// A differentiable map from a flat code vector to classifier logits.
pub trait CodeModel<T: Scalar> {
    type Tape;

    fn logits(&self, codes: &[T]) -> (Vec<T>, Self::Tape);

    /// Vector-Jacobian product of the logits with respect to the codes.
    fn codes_grad(&self, tape: &Self::Tape, dlogits: &[T]) -> Vec<T>;
}

/// Generator followed by classifier, over one precomputed mask.
pub struct SemanticPipeline<'a, T> {
    pub generator: &'a Generator<T>,
    pub classifier: &'a Backbone<T>,
    mask: &'a SemanticMask,
    layout: LayoutFeatures<T>,
}

impl<'a, T: Scalar> SemanticPipeline<'a, T> {
    pub fn new(generator: &'a Generator<T>, classifier: &'a Backbone<T>, mask: &'a SemanticMask) -> Result<Self> {
        let layout = generator.layout(&[mask])?;
        Ok(SemanticPipeline { generator, classifier, mask, layout })
    }

    /// The mask every step is generated from.
    pub fn mask(&self) -> &'a SemanticMask {
        self.mask
    }

    pub fn render(&self, codes: &[T]) -> Map<T> {
        self.generator.forward(&self.layout, codes).0
    }
}

impl<T: Scalar> CodeModel<T> for SemanticPipeline<'_, T> {
    type Tape = (GeneratorTape<T>, BackboneTape<T>);

    fn logits(&self, codes: &[T]) -> (Vec<T>, Self::Tape) {
        let (img, gtape) = self.generator.forward(&self.layout, codes);
        let (logits, btape) = self.classifier.forward(&img);
        (logits, (gtape, btape))
    }

    fn codes_grad(&self, tape: &Self::Tape, dlogits: &[T]) -> Vec<T> {
        let dimg = self.classifier.backward(&tape.1, dlogits, None, true).expect("input gradient requested");
        self.generator.backward(&self.layout, &tape.0, &dimg, None)
    }
}

/// Identity generator and logistic classifier: logits `[0, w·z + b]`.
#[derive(Clone, Debug)]
pub struct LogisticToy {
    pub w: Vec<f64>,
    pub b: f64,
}

impl CodeModel<f64> for LogisticToy {
    type Tape = ();

    fn logits(&self, codes: &[f64]) -> (Vec<f64>, ()) {
        let s: f64 = self.w.iter().zip(codes).map(|(w, z)| w * z).sum();
        (vec![0.0, s + self.b], ())
    }

    fn codes_grad(&self, _: &(), dlogits: &[f64]) -> Vec<f64> {
        self.w.iter().map(|w| w * dlogits[1]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct ObjectiveValue<T> {
    pub decision: f64,
    pub distance: f64,
    pub total: f64,
    pub probs: Vec<f64>,
    /// Gradient of the total with respect to the codes; exactly zero where
    /// the code is not free.
    pub grad: Vec<T>,
}

/// Evaluates `decision + λ·distance` and its gradient at `codes`. The
/// decision gradient is `(p - e_y)` pulled back through the model, also
/// where the loss clamp is engaged. `counter` is 1-based.
pub fn objective<T: Scalar, M: CodeModel<T>>(
    model: &M,
    codes: &[T],
    original: &[T],
    free: &[bool],
    counter: usize,
    lambda: f64,
) -> ObjectiveValue<T> {
    let (logits, tape) = model.logits(codes);
    let l: Vec<f64> = logits.iter().map(|v| v.as_f64()).collect();
    let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let probs = crate::nn::softmax(&l);
    let decision = (lse - l[counter - 1]).min(-PROB_FLOOR.ln());
    let dlogits: Vec<T> =
        probs.iter().enumerate().map(|(k, &p)| T::from_f64(if k + 1 == counter { p - 1.0 } else { p })).collect();
    let mut grad = model.codes_grad(&tape, &dlogits);
    let mut distance = 0.0;
    let two_lambda = T::from_f64(2.0 * lambda);
    for (i, g) in grad.iter_mut().enumerate() {
        let d = codes[i] - original[i];
        distance += d.as_f64() * d.as_f64();
        *g = if free[i] { *g + two_lambda * d } else { T::zero() };
    }
    ObjectiveValue { decision, distance, total: decision + lambda * distance, probs, grad }
}

#[derive(Clone, Debug)]
pub struct Optimization<T> {
    pub codes: Vec<T>,
    pub trajectory: Vec<TrajectoryStep>,
    /// Objective at the final codes.
    pub last: ObjectiveValue<T>,
    pub first_flip_step: Option<usize>,
}

/// Runs exactly `cfg.num_steps` masked Adam updates from `original`.
/// `free` marks each code coordinate that may change. Trajectory entry `i`
/// is evaluated at the codes before update `i`; `first_flip_step` is the
/// number of updates after which the counter class first exceeded 0.5.
pub fn optimize<T: Scalar, M: CodeModel<T>>(
    model: &M,
    original: &[T],
    free: &[bool],
    counter: usize,
    cfg: &OptimizerConfig,
) -> Result<Optimization<T>> {
    cfg.validate()?;
    assert_eq!(original.len(), free.len());
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(original.len());
    let mut codes = original.to_vec();
    let mut trajectory = Vec::with_capacity(cfg.num_steps);
    let mut first_flip_step = None;
    for step in 0..=cfg.num_steps {
        let obj = objective(model, &codes, original, free, counter, cfg.lambda);
        if !obj.total.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NumericalFailure { step, trajectory });
        }
        let p = obj.probs[counter - 1];
        if first_flip_step.is_none() && p > SUCCESS_THRESHOLD {
            first_flip_step = Some(step);
        }
        if step == cfg.num_steps {
            return Ok(Optimization { codes, trajectory, last: obj, first_flip_step });
        }
        trajectory.push(TrajectoryStep { step, decision_loss: obj.decision, distance_loss: obj.distance, counter_prob: p });
        state.step(&adam, &mut codes, &obj.grad, Some(free));
    }
    unreachable!("loop returns at the final step")
}

/// Per-coordinate freedom from per-class freedom.
pub fn expand_freedom(class_free: &[bool], code_dim: usize) -> Vec<bool> {
    class_free.iter().flat_map(|&f| std::iter::repeat_n(f, code_dim)).collect()
}

/// A query broken into layout and style, plus its reconstruction.
#[derive(Clone, Debug)]
pub struct Decomposition {
    pub image: ImageTensor,
    pub mask: SemanticMask,
    pub codes: StyleCodeSet,
    pub reconstruction: ImageTensor,
    pub query_probs: Vec<f64>,
}

/// Frozen stack plus one decision model.
pub struct Explainer<'a> {
    pub stack: &'a SemanticStack,
    pub model: &'a DecisionModel,
    pub model_id: String,
}

impl<'a> Explainer<'a> {
    pub fn new(stack: &'a SemanticStack, model: &'a DecisionModel, model_id: impl Into<String>) -> Result<Self> {
        if stack.profile != model.profile {
            return Err(Error::Config("decision model and semantic stack use different profiles".into()));
        }
        Ok(Explainer { stack, model, model_id: model_id.into() })
    }

    pub fn decompose(&self, image: &ImageTensor) -> Result<Decomposition> {
        let mask = self.stack.segment(image)?;
        self.decompose_with_mask(image, mask)
    }

    /// Decomposition under a given mask, e.g. a ground-truth one.
    pub fn decompose_with_mask(&self, image: &ImageTensor, mask: SemanticMask) -> Result<Decomposition> {
        self.stack.profile.check_image(image)?;
        self.stack.profile.check_mask(&mask)?;
        let codes = self.stack.autoencoder.encode(image, &mask)?;
        let reconstruction = self.stack.autoencoder.generate(&mask, &codes)?;
        let query_probs = self.model.predict(image)?;
        Ok(Decomposition { image: image.clone(), mask, codes, reconstruction, query_probs })
    }

    pub fn explain(&self, request: &CounterfactualRequest) -> Result<CounterfactualResult> {
        self.check_request(request)?;
        let d = self.decompose(&request.query_image)?;
        self.explain_decomposed(&d, request.counter_class, &request.target_regions, &request.optimizer)
    }

    fn check_request(&self, request: &CounterfactualRequest) -> Result<()> {
        request.target_regions.validate(self.stack.profile.num_classes)?;
        request.optimizer.validate()?;
        if request.model_id != self.model_id {
            return Err(Error::Config(format!("request names model {:?}, explainer holds {:?}", request.model_id, self.model_id)));
        }
        Ok(())
    }

    pub fn explain_decomposed(
        &self,
        d: &Decomposition,
        counter: CounterClass,
        targets: &RegionTargetSpec,
        cfg: &OptimizerConfig,
    ) -> Result<CounterfactualResult> {
        targets.validate(self.stack.profile.num_classes)?;
        let y = crate::types::resolve_counter_class(&d.query_probs, counter)?;
        let pipeline = SemanticPipeline::new(&self.stack.autoencoder.generator, &self.model.backbone, &d.mask)?;
        let dim = self.stack.profile.code_dim;
        let class_free = targets.freedom(d.codes.present());
        let original = d.codes.values().to_vec();
        let run = optimize(&pipeline, &original, &expand_freedom(&class_free, dim), y, cfg)?;
        let final_codes = StyleCodeSet::new(d.codes.num_classes(), dim, d.codes.present().to_vec(), run.codes.clone())?;
        let counterfactual_image = ImageTensor::from_map(&pipeline.render(&run.codes), 0)?;
        let success = run.last.probs[y - 1] > SUCCESS_THRESHOLD;
        Ok(CounterfactualResult {
            query_image: d.image.clone(),
            counterfactual_image,
            reconstruction_image: d.reconstruction.clone(),
            mask: pipeline.mask().clone(),
            delta_norms: d.codes.delta_norms(&final_codes),
            original_codes: d.codes.clone(),
            final_codes,
            loss_trajectory: run.trajectory,
            query_probs: d.query_probs.clone(),
            counter_class: y,
            final_probs: run.last.probs,
            success,
            first_flip_step: run.first_flip_step,
            target_regions: targets.clone(),
            optimizer: cfg.clone(),
            model_id: self.model_id.clone(),
        })
    }

    /// One independent run per region set, all starting from the same
    /// decomposition of the query.
    pub fn region_targeted_sweep(
        &self,
        request: &CounterfactualRequest,
        region_sets: &[RegionTargetSpec],
    ) -> Result<Vec<Result<CounterfactualResult>>> {
        self.check_request(request)?;
        let d = self.decompose(&request.query_image)?;
        Ok(region_sets
            .iter()
            .map(|c| self.explain_decomposed(&d, request.counter_class, c, &request.optimizer))
            .collect())
    }
}

pub const RESULT_FORMAT_VERSION: u32 = 1;
pub const RESULT_JSON: &str = "result.json";
pub const QUERY_PNG: &str = "query.png";
pub const COUNTERFACTUAL_PNG: &str = "counterfactual.png";
pub const RECONSTRUCTION_PNG: &str = "reconstruction.png";
pub const MASK_PNG: &str = "mask.png";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultArtifacts {
    pub query: String,
    pub counterfactual: String,
    pub reconstruction: String,
    pub mask: String,
    pub trajectory: String,
}

impl Default for ResultArtifacts {
    fn default() -> Self {
        ResultArtifacts {
            query: QUERY_PNG.into(),
            counterfactual: COUNTERFACTUAL_PNG.into(),
            reconstruction: RECONSTRUCTION_PNG.into(),
            mask: MASK_PNG.into(),
            trajectory: TRAJECTORY_CSV.into(),
        }
    }
}

/// JSON form of a result; images live in the artifact files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub format_version: u32,
    pub model_id: String,
    pub height: usize,
    pub width: usize,
    pub counter_class: usize,
    pub query_probs: Vec<f64>,
    pub final_probs: Vec<f64>,
    pub success: bool,
    pub first_flip_step: Option<usize>,
    pub target_regions: RegionTargetSpec,
    pub optimizer: OptimizerConfig,
    pub original_codes: StyleCodeSet,
    pub final_codes: StyleCodeSet,
    pub delta_norms: Vec<f64>,
    pub loss_trajectory: Vec<TrajectoryStep>,
    pub artifacts: ResultArtifacts,
}

impl ResultRecord {
    pub fn from_result(r: &CounterfactualResult) -> Self {
        ResultRecord {
            format_version: RESULT_FORMAT_VERSION,
            model_id: r.model_id.clone(),
            height: r.query_image.height(),
            width: r.query_image.width(),
            counter_class: r.counter_class,
            query_probs: r.query_probs.clone(),
            final_probs: r.final_probs.clone(),
            success: r.success,
            first_flip_step: r.first_flip_step,
            target_regions: r.target_regions.clone(),
            optimizer: r.optimizer.clone(),
            original_codes: r.original_codes.clone(),
            final_codes: r.final_codes.clone(),
            delta_norms: r.delta_norms.clone(),
            loss_trajectory: r.loss_trajectory.clone(),
            artifacts: ResultArtifacts::default(),
        }
    }
}

/// sha256 over the JSON record and the exact bits of every image and the
/// mask of a result.
pub fn result_digest(r: &CounterfactualResult) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ResultRecord::from_result(r)).expect("result record serializes"));
    for img in [&r.query_image, &r.counterfactual_image, &r.reconstruction_image] {
        for v in img.pixels() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(r.mask.labels());
    hex::encode(h.finalize())
}

pub fn trajectory_csv(steps: &[TrajectoryStep]) -> String {
    let mut out = String::from("step,decision_loss,distance_loss,counter_prob\n");
    for s in steps {
        let _ = writeln!(out, "{},{},{},{}", s.step, s.decision_loss, s.distance_loss, s.counter_prob);
    }
    out
}

/// Writes a result directory; `dir` must not exist or be empty. The JSON
/// record is written last.
pub fn save_result(dir: &Path, r: &CounterfactualResult) -> Result<()> {
    if dir.exists() && fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some() {
        return Err(Error::Precondition(format!("{} already holds a result", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    pngio::write_image(&dir.join(QUERY_PNG), &r.query_image)?;
    pngio::write_image(&dir.join(COUNTERFACTUAL_PNG), &r.counterfactual_image)?;
    pngio::write_image(&dir.join(RECONSTRUCTION_PNG), &r.reconstruction_image)?;
    pngio::write_mask(&dir.join(MASK_PNG), &r.mask)?;
    let csv = dir.join(TRAJECTORY_CSV);
    fs::write(&csv, trajectory_csv(&r.loss_trajectory)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join(RESULT_JSON);
    let mut bytes = serde_json::to_vec_pretty(&ResultRecord::from_result(r))?;
    bytes.push(b'\n');
    fs::write(&json, bytes).map_err(|e| Error::io(&json, e))
}

/// Reads a result directory back; images come back 8-bit quantized.
pub fn load_result(dir: &Path) -> Result<CounterfactualResult> {
    let json = dir.join(RESULT_JSON);
    let bytes = fs::read(&json).map_err(|e| Error::io(&json, e))?;
    let rec: ResultRecord = serde_json::from_slice(&bytes)?;
    if rec.format_version != RESULT_FORMAT_VERSION {
        return Err(Error::Config(format!("unsupported result format {}", rec.format_version)));
    }
    let n = rec.original_codes.num_classes();
    Ok(CounterfactualResult {
        query_image: pngio::read_image(&dir.join(&rec.artifacts.query))?,
        counterfactual_image: pngio::read_image(&dir.join(&rec.artifacts.counterfactual))?,
        reconstruction_image: pngio::read_image(&dir.join(&rec.artifacts.reconstruction))?,
        mask: pngio::read_mask(&dir.join(&rec.artifacts.mask), n)?,
        original_codes: rec.original_codes,
        final_codes: rec.final_codes,
        delta_norms: rec.delta_norms,
        loss_trajectory: rec.loss_trajectory,
        query_probs: rec.query_probs,
        counter_class: rec.counter_class,
        final_probs: rec.final_probs,
        success: rec.success,
        first_flip_step: rec.first_flip_step,
        target_regions: rec.target_regions,
        optimizer: rec.optimizer,
        model_id: rec.model_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_loss_values() {
        assert_eq!(decision_loss(&[0.0, 1.0], 2), 0.0);
        assert!((decision_loss(&[0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(decision_loss(&[1.0 - 1e-13, 1e-13], 2), -(1e-12f64).ln());
    }

    #[test]
    fn distance_loss_hand_arithmetic() {
        let a = StyleCodeSet::new(3, 2, vec![true, true, false], vec![0.0; 6]).unwrap();
        let b = StyleCodeSet::new(3, 2, vec![true, true, false], vec![3.0, 4.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(distance_loss(&a, &b).unwrap(), 26.0);
        assert_eq!(distance_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_target_set_leaves_codes_alone() {
        let toy = LogisticToy { w: vec![1.0, -2.0], b: 0.3 };
        let z0 = [0.2, 0.1];
        let run = optimize(&toy, &z0, &[false, false], 2, &OptimizerConfig::default()).unwrap();
        assert_eq!(run.codes, z0);
        assert_eq!(run.trajectory.len(), 100);
    }
}
