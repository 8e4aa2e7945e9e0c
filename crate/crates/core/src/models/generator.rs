use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{one_hot, with_coords};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Grads, Map, ParamStore, Scalar};
use crate::types::{ImageTensor, SemanticMask, StyleCodeSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub width: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        GeneratorArch { width: 32 }
    }
}

/// Mask-conditioned generator with per-region denormalization.
///
/// A 3×3 stem turns the one-hot layout (plus coordinates) into features
/// `a`. Two modulation stages then compute `lrelu(a ⊙ (1 + γ_c) + β_c)`
/// where `(γ_c, β_c)` is a linear function of the code of the pixel's own
/// class, separated by a 1×1 conv, and a final 1×1 conv + tanh produces RGB.
/// Everything after the stem is per-pixel, so a code only reaches the pixels
/// of its class.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub arch: GeneratorArch,
    pub num_classes: usize,
    pub code_dim: usize,
    pub store: ParamStore<T>,
    stem: Conv2d,
    style: Conv2d,
    mid: Conv2d,
    out: Conv2d,
}

/// Code-independent part of the forward pass for a batch of masks.
#[derive(Clone, Debug)]
pub struct LayoutFeatures<T> {
    input: Map<T>,
    base: Map<T>,
    labels: Vec<u8>,
}

impl<T> LayoutFeatures<T> {
    pub fn batch(&self) -> usize {
        self.base.n
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorTape<T> {
    codes: Map<T>,
    style: Map<T>,
    h1: Map<T>,
    a2: Map<T>,
    h2: Map<T>,
    out: Map<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(num_classes: usize, code_dim: usize, arch: GeneratorArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = arch.width;
        let stem = Conv2d::new(&mut store, "stem", num_classes + 2, c, 3, 1, 1, 1.0, &mut rng);
        let style = Conv2d::linear(&mut store, "style", code_dim, 4 * c, 0.5, &mut rng);
        let mid = Conv2d::linear(&mut store, "mid", c, c, 1.0, &mut rng);
        let out = Conv2d::linear(&mut store, "out", c, 3, 1.0, &mut rng);
        Generator { arch, num_classes, code_dim, store, stem, style, mid, out }
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            arch: self.arch.clone(),
            num_classes: self.num_classes,
            code_dim: self.code_dim,
            store: self.store.cast(),
            stem: self.stem.clone(),
            style: self.style.clone(),
            mid: self.mid.clone(),
            out: self.out.clone(),
        }
    }

    pub fn layout(&self, masks: &[&SemanticMask]) -> Result<LayoutFeatures<T>> {
        for m in masks {
            if m.num_classes() != self.num_classes {
                return Err(Error::InvalidMask(format!(
                    "mask has {} classes, generator expects {}",
                    m.num_classes(),
                    self.num_classes
                )));
            }
        }
        let input = with_coords(&one_hot::<T>(masks));
        let base = self.stem.forward(&self.store, &input);
        let labels = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
        Ok(LayoutFeatures { input, base, labels })
    }

    fn modulate(&self, x: &Map<T>, style: &Map<T>, labels: &[u8], stage: usize) -> Map<T> {
        let c = self.arch.width;
        let hw = x.h * x.w;
        let mut out = Map::zeros(x.n, x.h, x.w, c);
        for p in 0..x.pixels() {
            let row = (p / hw) * self.num_classes + labels[p] as usize - 1;
            let s = &style.data[row * 4 * c + stage * 2 * c..row * 4 * c + (stage + 1) * 2 * c];
            let (g, b) = s.split_at(c);
            for ch in 0..c {
                out.data[p * c + ch] = x.data[p * c + ch] * (T::one() + g[ch]) + b[ch];
            }
        }
        nn::leaky_relu(&out)
    }

    /// `codes` holds `batch × num_classes × code_dim` values.
    pub fn forward(&self, layout: &LayoutFeatures<T>, codes: &[T]) -> (Map<T>, GeneratorTape<T>) {
        let n = layout.batch();
        assert_eq!(codes.len(), n * self.num_classes * self.code_dim, "generator code length");
        let codes = Map::vectors(n * self.num_classes, self.code_dim, codes.to_vec());
        let style = self.style.forward(&self.store, &codes);
        let h1 = self.modulate(&layout.base, &style, &layout.labels, 0);
        let a2 = self.mid.forward(&self.store, &h1);
        let h2 = self.modulate(&a2, &style, &layout.labels, 1);
        let out = nn::tanh(&self.out.forward(&self.store, &h2));
        (out.clone(), GeneratorTape { codes, style, h1, a2, h2, out })
    }

    /// Backward through a modulation stage given the post-activation output.
    fn modulate_backward(
        &self,
        x: &Map<T>,
        y: &Map<T>,
        dy: &Map<T>,
        style: &Map<T>,
        dstyle: &mut [T],
        labels: &[u8],
        stage: usize,
    ) -> Map<T> {
        let c = self.arch.width;
        let hw = x.h * x.w;
        let dpre = nn::leaky_relu_backward(y, dy);
        let mut dx = Map::zeros(x.n, x.h, x.w, c);
        for p in 0..x.pixels() {
            let row = (p / hw) * self.num_classes + labels[p] as usize - 1;
            let off = row * 4 * c + stage * 2 * c;
            for ch in 0..c {
                let d = dpre.data[p * c + ch];
                dx.data[p * c + ch] = d * (T::one() + style.data[off + ch]);
                dstyle[off + ch] += d * x.data[p * c + ch];
                dstyle[off + c + ch] += d;
            }
        }
        dx
    }

    /// Returns the gradient with respect to the codes. Parameter gradients
    /// are accumulated into `grads` when given.
    pub fn backward(
        &self,
        layout: &LayoutFeatures<T>,
        tape: &GeneratorTape<T>,
        dout: &Map<T>,
        mut grads: Option<&mut Grads<T>>,
    ) -> Vec<T> {
        let dpre = nn::tanh_backward(&tape.out, dout);
        let dh2 = self.out.backward(&self.store, &tape.h2, &dpre, grads.as_deref_mut(), true).unwrap();
        let mut dstyle = vec![T::zero(); tape.style.data.len()];
        let da2 = self.modulate_backward(&tape.a2, &tape.h2, &dh2, &tape.style, &mut dstyle, &layout.labels, 1);
        let dh1 = self.mid.backward(&self.store, &tape.h1, &da2, grads.as_deref_mut(), true).unwrap();
        let dbase = self.modulate_backward(&layout.base, &tape.h1, &dh1, &tape.style, &mut dstyle, &layout.labels, 0);
        if let Some(g) = grads.as_deref_mut() {
            self.stem.backward(&self.store, &layout.input, &dbase, Some(g), false);
        }
        let dstyle = Map::vectors(tape.style.n, tape.style.c, dstyle);
        self.style.backward(&self.store, &tape.codes, &dstyle, grads, true).unwrap().data
    }

    pub fn generate(&self, mask: &SemanticMask, codes: &StyleCodeSet) -> Result<ImageTensor> {
        if codes.num_classes() != self.num_classes || codes.code_dim() != self.code_dim {
            return Err(Error::Shape(format!(
                "codes are {}×{}, generator expects {}×{}",
                codes.num_classes(),
                codes.code_dim(),
                self.num_classes,
                self.code_dim
            )));
        }
        let layout = self.layout(&[mask])?;
        let (img, _) = self.forward(&layout, &codes.values_as::<T>());
        ImageTensor::from_map(&img, 0)
    }
}
