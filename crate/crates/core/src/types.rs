//! Domain types shared by every stage of the pipeline.
//!
//! Semantic classes are 1-based (`1..=N`) everywhere a class index is
//! visible: mask pixels, region targets, JSON. Decision-model classes are
//! 1-based as well (`1..=K`), matching the probability vector order.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Map, Scalar};

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Fixed per-run dimensions shared by data, models and checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub code_dim: usize,
    pub class_names: Vec<String>,
}

impl Profile {
    pub fn new(height: usize, width: usize, num_classes: usize, code_dim: usize) -> Self {
        let class_names = (1..=num_classes).map(|c| format!("class{c}")).collect();
        Profile { height, width, num_classes, code_dim, class_names }
    }

    pub fn check(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.code_dim == 0 {
            return Err(Error::Config("profile dimensions must be positive".into()));
        }
        if self.num_classes == 0 || self.num_classes > 255 {
            return Err(Error::Config(format!("num_classes {} outside 1..=255", self.num_classes)));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::Config("class_names length differs from num_classes".into()));
        }
        Ok(())
    }

    /// Resolves a class by 1-based index or by name.
    pub fn class_id(&self, token: &str) -> Result<u8> {
        if let Ok(c) = token.parse::<usize>() {
            if (1..=self.num_classes).contains(&c) {
                return Ok(c as u8);
            }
            return Err(Error::Config(format!("class index {c} outside 1..={}", self.num_classes)));
        }
        self.class_names
            .iter()
            .position(|n| n == token)
            .map(|i| (i + 1) as u8)
            .ok_or_else(|| Error::Config(format!("unknown class name {token:?}")))
    }

    pub fn class_name(&self, class: u8) -> &str {
        &self.class_names[class as usize - 1]
    }

    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.height != self.height || image.width != self.width {
            return Err(Error::Shape(format!(
                "image is {}x{}, profile expects {}x{}",
                image.height, image.width, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &SemanticMask) -> Result<()> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::Shape(format!(
                "mask is {}x{}, profile expects {}x{}",
                mask.height, mask.width, self.height, self.width
            )));
        }
        if mask.num_classes != self.num_classes {
            return Err(Error::InvalidMask(format!(
                "mask declares {} classes, profile has {}",
                mask.num_classes, self.num_classes
            )));
        }
        Ok(())
    }
}

/// RGB image, row-major HWC, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} RGB image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(ImageTensor { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn to_map<T: Scalar>(&self) -> Map<T> {
        Map::from_vec(
            1,
            self.height,
            self.width,
            3,
            self.pixels.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    /// Extracts batch item `b` of a 3-channel map, clamping to `[-1, 1]`.
    pub fn from_map<T: Scalar>(map: &Map<T>, b: usize) -> Result<Self> {
        if map.c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {}", map.c)));
        }
        let len = map.h * map.w * 3;
        let pixels = map.data[b * len..(b + 1) * len]
            .iter()
            .map(|v| (v.as_f64() as f32).clamp(-1.0, 1.0))
            .collect();
        Self::new(map.h, map.w, pixels)
    }

    pub fn batch<T: Scalar>(images: &[&ImageTensor]) -> Map<T> {
        let maps: Vec<Map<T>> = images.iter().map(|i| i.to_map()).collect();
        Map::stack(&maps.iter().collect::<Vec<_>>())
    }

    /// Mean absolute per-channel difference.
    pub fn mean_abs_diff(&self, other: &ImageTensor) -> f64 {
        assert_eq!(self.pixels.len(), other.pixels.len());
        let s: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs() as f64).sum();
        s / self.pixels.len() as f64
    }
}

/// Per-pixel semantic labels in `1..=num_classes`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!("{} labels for a {height}x{width} mask", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l as usize > num_classes) {
            return Err(Error::InvalidMask(format!("label {bad} outside 1..={num_classes}")));
        }
        Ok(SemanticMask { height, width, num_classes, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Pixel counts per class, index `c - 1`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    /// Presence flags per class, index `c - 1`.
    pub fn present(&self) -> Vec<bool> {
        self.class_counts().into_iter().map(|c| c > 0).collect()
    }

    pub fn present_classes(&self) -> BTreeSet<u8> {
        self.present()
            .into_iter()
            .enumerate()
            .filter(|(_, p)| *p)
            .map(|(i, _)| (i + 1) as u8)
            .collect()
    }

    /// Intersection-over-union per class, index `c - 1`; `None` where the
    /// class is absent from both masks.
    pub fn iou_per_class(&self, other: &SemanticMask) -> Vec<Option<f64>> {
        assert_eq!(self.labels.len(), other.labels.len(), "iou of differently sized masks");
        let n = self.num_classes.max(other.num_classes);
        let mut inter = vec![0usize; n];
        let mut union = vec![0usize; n];
        for (&a, &b) in self.labels.iter().zip(&other.labels) {
            if a == b {
                inter[a as usize - 1] += 1;
                union[a as usize - 1] += 1;
            } else {
                union[a as usize - 1] += 1;
                union[b as usize - 1] += 1;
            }
        }
        inter
            .iter()
            .zip(&union)
            .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
            .collect()
    }

    /// Mean IoU over classes present in either mask.
    pub fn mean_iou(&self, other: &SemanticMask) -> f64 {
        let ious: Vec<f64> = self.iou_per_class(other).into_iter().flatten().collect();
        ious.iter().sum::<f64>() / ious.len().max(1) as f64
    }

    /// Relabels every pixel through `perm` (`perm[c - 1]` is the new label of `c`).
    pub fn remap(&self, perm: &[u8]) -> Result<SemanticMask> {
        let labels = self.labels.iter().map(|&l| perm[l as usize - 1]).collect();
        SemanticMask::new(self.height, self.width, self.num_classes, labels)
    }
}

/// Per-class style codes `z = (z_c)`, one `code_dim` vector per class.
///
/// Codes of classes absent from the associated mask are exactly zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StyleCodeSetRepr", into = "StyleCodeSetRepr")]
pub struct StyleCodeSet {
    num_classes: usize,
    code_dim: usize,
    present: Vec<bool>,
    values: Vec<f32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleCodeSetRepr {
    num_classes: usize,
    code_dim: usize,
    present_classes: Vec<u8>,
    codes: Vec<Vec<f32>>,
}

impl TryFrom<StyleCodeSetRepr> for StyleCodeSet {
    type Error = Error;

    fn try_from(r: StyleCodeSetRepr) -> Result<Self> {
        if r.codes.len() != r.num_classes || r.codes.iter().any(|c| c.len() != r.code_dim) {
            return Err(Error::Shape("codes must be num_classes vectors of code_dim".into()));
        }
        let mut present = vec![false; r.num_classes];
        for c in r.present_classes {
            if c == 0 || c as usize > r.num_classes {
                return Err(Error::InvalidMask(format!("present class {c} out of range")));
            }
            present[c as usize - 1] = true;
        }
        StyleCodeSet::new(r.num_classes, r.code_dim, present, r.codes.concat())
    }
}

impl From<StyleCodeSet> for StyleCodeSetRepr {
    fn from(s: StyleCodeSet) -> Self {
        StyleCodeSetRepr {
            num_classes: s.num_classes,
            code_dim: s.code_dim,
            present_classes: (1..=s.num_classes as u8).filter(|&c| s.is_present(c)).collect(),
            codes: s.values.chunks(s.code_dim).map(|c| c.to_vec()).collect(),
        }
    }
}

impl StyleCodeSet {
    pub fn new(num_classes: usize, code_dim: usize, present: Vec<bool>, values: Vec<f32>) -> Result<Self> {
        if present.len() != num_classes || values.len() != num_classes * code_dim {
            return Err(Error::Shape(format!(
                "style codes need {num_classes} slots of dimension {code_dim}"
            )));
        }
        for (c, p) in present.iter().enumerate() {
            if !p && values[c * code_dim..(c + 1) * code_dim].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidMask(format!("absent class {} has a non-zero code", c + 1)));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("non-finite style code".into()));
        }
        Ok(StyleCodeSet { num_classes, code_dim, present, values })
    }

    /// Builds a code set from arbitrary-precision values, zeroing absent slots.
    pub fn from_values<T: Scalar>(num_classes: usize, code_dim: usize, present: Vec<bool>, values: &[T]) -> Result<Self> {
        let mut v: Vec<f32> = values.iter().map(|x| x.as_f64() as f32).collect();
        for (c, p) in present.iter().enumerate() {
            if !p {
                v[c * code_dim..(c + 1) * code_dim].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Self::new(num_classes, code_dim, present, v)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn is_present(&self, class: u8) -> bool {
        self.present[class as usize - 1]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    /// Code of 1-based class `class`.
    pub fn code(&self, class: u8) -> &[f32] {
        let c = class as usize - 1;
        &self.values[c * self.code_dim..(c + 1) * self.code_dim]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_as<T: Scalar>(&self) -> Vec<T> {
        self.values.iter().map(|&v| T::from_f64(v as f64)).collect()
    }

    /// `z + delta`, with `delta` masked to present classes.
    pub fn add_masked(&self, delta: &[f32]) -> Result<StyleCodeSet> {
        if delta.len() != self.values.len() {
            return Err(Error::Shape("delta length differs from code set".into()));
        }
        let mut values = self.values.clone();
        for (c, p) in self.present.iter().enumerate() {
            if *p {
                let r = c * self.code_dim..(c + 1) * self.code_dim;
                values[r.clone()].iter_mut().zip(&delta[r]).for_each(|(v, d)| *v += d);
            }
        }
        Self::new(self.num_classes, self.code_dim, self.present.clone(), values)
    }

    /// `‖z_c − other_c‖₂` per class.
    pub fn delta_norms(&self, other: &StyleCodeSet) -> Vec<f64> {
        self.values
            .chunks(self.code_dim)
            .zip(other.values.chunks(other.code_dim))
            .map(|(a, b)| {
                a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>().sqrt()
            })
            .collect()
    }
}

/// Subset `C` of semantic classes whose codes may change.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionTargetSpec {
    classes: BTreeSet<u8>,
}

impl RegionTargetSpec {
    pub fn all(num_classes: usize) -> Self {
        RegionTargetSpec { classes: (1..=num_classes as u8).collect() }
    }

    pub fn none() -> Self {
        RegionTargetSpec::default()
    }

    pub fn new(classes: impl IntoIterator<Item = u8>, num_classes: usize) -> Result<Self> {
        let classes: BTreeSet<u8> = classes.into_iter().collect();
        if let Some(&bad) = classes.iter().find(|&&c| c == 0 || c as usize > num_classes) {
            return Err(Error::Config(format!("target class {bad} outside 1..={num_classes}")));
        }
        Ok(RegionTargetSpec { classes })
    }

    pub fn contains(&self, class: u8) -> bool {
        self.classes.contains(&class)
    }

    pub fn classes(&self) -> &BTreeSet<u8> {
        &self.classes
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        Self::new(self.classes.iter().copied(), num_classes).map(|_| ())
    }

    /// Per-class optimization freedom: targeted and present in the mask.
    pub fn freedom(&self, present: &[bool]) -> Vec<bool> {
        present
            .iter()
            .enumerate()
            .map(|(i, &p)| p && self.contains((i + 1) as u8))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub num_steps: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lambda: 0.3, learning_rate: 1e-2, num_steps: 100, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Target class of the explanation: explicit, or the complement of the
/// predicted class for binary models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CounterClassRepr", into = "CounterClassRepr")]
pub enum CounterClass {
    #[default]
    Auto,
    Explicit(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum CounterClassRepr {
    Index(usize),
    Name(String),
}

impl TryFrom<CounterClassRepr> for CounterClass {
    type Error = String;

    fn try_from(r: CounterClassRepr) -> std::result::Result<Self, String> {
        match r {
            CounterClassRepr::Index(i) => Ok(CounterClass::Explicit(i)),
            CounterClassRepr::Name(s) if s == "auto" => Ok(CounterClass::Auto),
            CounterClassRepr::Name(s) => Err(format!("counter class must be an index or \"auto\", got {s:?}")),
        }
    }
}

impl From<CounterClass> for CounterClassRepr {
    fn from(c: CounterClass) -> Self {
        match c {
            CounterClass::Auto => CounterClassRepr::Name("auto".into()),
            CounterClass::Explicit(i) => CounterClassRepr::Index(i),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CounterfactualRequest {
    pub query_image: ImageTensor,
    pub counter_class: CounterClass,
    pub target_regions: RegionTargetSpec,
    pub optimizer: OptimizerConfig,
    pub model_id: String,
}

/// Losses and counter-class probability at one optimization step, evaluated
/// at the codes the update of that step starts from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub step: usize,
    pub decision_loss: f64,
    pub distance_loss: f64,
    pub counter_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CounterfactualResult {
    pub query_image: ImageTensor,
    pub counterfactual_image: ImageTensor,
    pub reconstruction_image: ImageTensor,
    pub mask: SemanticMask,
    pub original_codes: StyleCodeSet,
    pub final_codes: StyleCodeSet,
    pub delta_norms: Vec<f64>,
    pub loss_trajectory: Vec<TrajectoryStep>,
    pub query_probs: Vec<f64>,
    pub counter_class: usize,
    pub final_probs: Vec<f64>,
    pub success: bool,
    pub first_flip_step: Option<usize>,
    pub target_regions: RegionTargetSpec,
    pub optimizer: OptimizerConfig,
    pub model_id: String,
}

impl CounterfactualResult {
    pub fn squared_displacement(&self) -> f64 {
        self.delta_norms.iter().map(|d| d * d).sum()
    }
}

/// Index of the largest probability, 1-based; ties go to the lowest index.
pub fn predicted_class(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best + 1
}

/// Picks the counter class `y` for a query whose model output is `probs`.
pub fn resolve_counter_class(probs: &[f64], counter: CounterClass) -> Result<usize> {
    let sum: f64 = probs.iter().sum();
    if probs.is_empty() || (sum - 1.0).abs() > PROB_SUM_TOL || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Precondition(format!("not a probability vector (sum {sum})")));
    }
    let predicted = predicted_class(probs);
    match counter {
        CounterClass::Explicit(y) => {
            if y == 0 || y > probs.len() {
                return Err(Error::Config(format!("counter class {y} outside 1..={}", probs.len())));
            }
            if y == predicted {
                return Err(Error::Rejected(format!("counter class {y} is the predicted class")));
            }
            Ok(y)
        }
        CounterClass::Auto if probs.len() == 2 => Ok(3 - predicted),
        CounterClass::Auto => Err(Error::Unsupported(format!(
            "automatic counter class needs a binary model, this one has {} classes",
            probs.len()
        ))),
    }
}

impl CounterfactualRequest {
    pub fn resolve_counter_class(&self, probs: &[f64]) -> Result<usize> {
        resolve_counter_class(probs, self.counter_class)
    }
}
