//! Network definitions. Each network owns its [`ParamStore`] and spells out
//! its own forward and backward pass on top of [`crate::nn`].

mod backbone;
mod encoder;
mod generator;
mod segmenter;

pub use backbone::{Backbone, BackboneArch, BackboneTape, Visibility};
pub use encoder::{EncoderArch, EncoderTape, StyleEncoder};
pub use generator::{Generator, GeneratorArch, GeneratorTape, LayoutFeatures};
pub use segmenter::{Segmenter, SegmenterArch, SegmenterTape};

use crate::nn::{Map, Scalar};
use crate::types::SemanticMask;

/// Appends normalized `(y, x)` coordinate channels in `[-1, 1]`.
pub fn with_coords<T: Scalar>(x: &Map<T>) -> Map<T> {
    let c = x.c + 2;
    let mut data = Vec::with_capacity(x.pixels() * c);
    let fy = T::from_f64(2.0 / (x.h.max(2) - 1) as f64);
    let fx = T::from_f64(2.0 / (x.w.max(2) - 1) as f64);
    for b in 0..x.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let p = (b * x.h + y) * x.w + xx;
                data.extend_from_slice(x.pixel(p));
                data.push(T::from_usize(y) * fy - T::one());
                data.push(T::from_usize(xx) * fx - T::one());
            }
        }
    }
    Map::from_vec(x.n, x.h, x.w, c, data)
}

/// Drops the coordinate channels added by [`with_coords`] from a gradient.
pub fn strip_coords<T: Scalar>(d: &Map<T>) -> Map<T> {
    crate::nn::split_channels(d, d.c - 2).0
}

/// One-hot encoding of masks, `[n, h, w, num_classes]`.
pub fn one_hot<T: Scalar>(masks: &[&SemanticMask]) -> Map<T> {
    let first = masks[0];
    let (h, w, nc) = (first.height(), first.width(), first.num_classes());
    let mut m = Map::zeros(masks.len(), h, w, nc);
    for (b, mask) in masks.iter().enumerate() {
        for (p, &l) in mask.labels().iter().enumerate() {
            m.data[(b * h * w + p) * nc + l as usize - 1] = T::one();
        }
    }
    m
}

/// Mean softmax cross-entropy over rows of `logits` (`rows × k`) and its
/// gradient. Targets are 0-based; `weights` optionally rescales each row.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], k: usize, targets: &[usize], weights: Option<&[T]>) -> (T, Vec<T>) {
    let rows = targets.len();
    assert_eq!(logits.len(), rows * k);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); logits.len()];
    let mut total_w = T::zero();
    for r in 0..rows {
        let w = weights.map_or(T::one(), |w| w[r]);
        total_w += w;
        let row = &logits[r * k..(r + 1) * k];
        let lsm = crate::nn::log_softmax(row);
        loss -= w * lsm[targets[r]];
        for j in 0..k {
            grad[r * k + j] = w * lsm[j].exp();
        }
        grad[r * k + targets[r]] -= w;
    }
    let inv = T::one() / total_w.max(T::from_f64(1e-12));
    grad.iter_mut().for_each(|g| *g *= inv);
    (loss * inv, grad)
}

/// Per-row argmax, ties toward the lowest index.
pub fn argmax_rows<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coords_span_unit_square() {
        let m = with_coords(&Map::<f64>::zeros(1, 3, 5, 1));
        assert_eq!(m.c, 3);
        assert_eq!(&m.data[m.idx(0, 0, 0, 1)..m.idx(0, 0, 0, 1) + 2], &[-1.0, -1.0]);
        assert_eq!(&m.data[m.idx(0, 2, 4, 1)..m.idx(0, 2, 4, 1) + 2], &[1.0, 1.0]);
        assert_eq!(strip_coords(&m).c, 1);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let logits = vec![0.3f64, -1.2, 0.5, 2.0, 0.1, -0.4];
        let targets = [2, 0];
        let (_, g) = softmax_cross_entropy(&logits, 3, &targets, None);
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p[i] += 1e-6;
            let mut m = logits.clone();
            m[i] -= 1e-6;
            let fd = (softmax_cross_entropy(&p, 3, &targets, None).0 - softmax_cross_entropy(&m, 3, &targets, None).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&[1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
