use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Grads, Map, ParamStore, Scalar};
use crate::types::{ImageTensor, SemanticMask, StyleCodeSet};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub width: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch { width: 32 }
    }
}

/// Per-region style encoder: a per-pixel MLP, average pooling inside each
/// semantic region, and a shared projection to the code space. Codes of
/// absent classes are zero.
#[derive(Clone, Debug)]
pub struct StyleEncoder<T> {
    pub arch: EncoderArch,
    pub num_classes: usize,
    pub code_dim: usize,
    pub store: ParamStore<T>,
    l1: Conv2d,
    l2: Conv2d,
    proj: Conv2d,
}

#[derive(Clone, Debug)]
pub struct EncoderTape<T> {
    x: Map<T>,
    f1: Map<T>,
    f2: Map<T>,
    pooled: Map<T>,
    counts: Vec<usize>,
    labels: Vec<u8>,
}

impl<T: Scalar> StyleEncoder<T> {
    pub fn new(num_classes: usize, code_dim: usize, arch: EncoderArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = arch.width;
        let l1 = Conv2d::linear(&mut store, "l1", 3, w, 1.0, &mut rng);
        let l2 = Conv2d::linear(&mut store, "l2", w, w, 1.0, &mut rng);
        let proj = Conv2d::linear(&mut store, "proj", w, code_dim, 1.0, &mut rng);
        StyleEncoder { arch, num_classes, code_dim, store, l1, l2, proj }
    }

    pub fn cast<U: Scalar>(&self) -> StyleEncoder<U> {
        StyleEncoder {
            arch: self.arch.clone(),
            num_classes: self.num_classes,
            code_dim: self.code_dim,
            store: self.store.cast(),
            l1: self.l1.clone(),
            l2: self.l2.clone(),
            proj: self.proj.clone(),
        }
    }

    /// Returns `batch × num_classes × code_dim` codes and per-slot presence.
    pub fn forward(&self, images: &Map<T>, masks: &[&SemanticMask]) -> (Vec<T>, Vec<bool>, EncoderTape<T>) {
        assert_eq!(images.n, masks.len(), "encoder batch");
        let (nc, w) = (self.num_classes, self.arch.width);
        let f1 = nn::leaky_relu(&self.l1.forward(&self.store, images));
        let f2 = nn::leaky_relu(&self.l2.forward(&self.store, &f1));
        let labels: Vec<u8> = masks.iter().flat_map(|m| m.labels().iter().copied()).collect();
        let hw = images.h * images.w;
        let mut pooled = vec![T::zero(); images.n * nc * w];
        let mut counts = vec![0usize; images.n * nc];
        for (p, &l) in labels.iter().enumerate() {
            let row = (p / hw) * nc + l as usize - 1;
            counts[row] += 1;
            for (a, v) in pooled[row * w..(row + 1) * w].iter_mut().zip(f2.pixel(p)) {
                *a += *v;
            }
        }
        for (row, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let inv = T::one() / T::from_usize(cnt);
                pooled[row * w..(row + 1) * w].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let pooled = Map::vectors(images.n * nc, w, pooled);
        let mut codes = self.proj.forward(&self.store, &pooled).data;
        let present: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
        for (row, p) in present.iter().enumerate() {
            if !p {
                codes[row * self.code_dim..(row + 1) * self.code_dim].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let tape = EncoderTape { x: images.clone(), f1, f2, pooled, counts, labels };
        (codes, present, tape)
    }

    /// Accumulates parameter gradients for `dcodes`.
    pub fn backward(&self, tape: &EncoderTape<T>, dcodes: &[T], grads: &mut Grads<T>) {
        let (nc, w, d) = (self.num_classes, self.arch.width, self.code_dim);
        let mut dc = dcodes.to_vec();
        for (row, &cnt) in tape.counts.iter().enumerate() {
            if cnt == 0 {
                dc[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let dc = Map::vectors(tape.pooled.n, d, dc);
        let dpooled = self.proj.backward(&self.store, &tape.pooled, &dc, Some(grads), true).unwrap();
        let hw = tape.x.h * tape.x.w;
        let mut df2 = Map::zeros(tape.f2.n, tape.f2.h, tape.f2.w, w);
        for (p, &l) in tape.labels.iter().enumerate() {
            let row = (p / hw) * nc + l as usize - 1;
            let inv = T::one() / T::from_usize(tape.counts[row]);
            for ch in 0..w {
                df2.data[p * w + ch] = dpooled.data[row * w + ch] * inv;
            }
        }
        let dh2 = nn::leaky_relu_backward(&tape.f2, &df2);
        let df1 = self.l2.backward(&self.store, &tape.f1, &dh2, Some(grads), true).unwrap();
        let dh1 = nn::leaky_relu_backward(&tape.f1, &df1);
        self.l1.backward(&self.store, &tape.x, &dh1, Some(grads), false);
    }

    pub fn encode(&self, image: &ImageTensor, mask: &SemanticMask) -> Result<StyleCodeSet> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Shape("image and mask sizes differ".into()));
        }
        if mask.num_classes() != self.num_classes {
            return Err(Error::InvalidMask(format!(
                "mask has {} classes, encoder expects {}",
                mask.num_classes(),
                self.num_classes
            )));
        }
        let (codes, present, _) = self.forward(&image.to_map(), &[mask]);
        StyleCodeSet::from_values(self.num_classes, self.code_dim, present, &codes)
    }
}
