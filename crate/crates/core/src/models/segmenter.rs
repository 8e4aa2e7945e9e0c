use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax_rows, with_coords};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Grads, Map, ParamStore, Scalar};
use crate::types::{ImageTensor, SemanticMask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterArch {
    pub width: usize,
}

impl Default for SegmenterArch {
    fn default() -> Self {
        SegmenterArch { width: 16 }
    }
}

/// Two-level encoder-decoder with skip connections over RGB + coordinates.
/// Input sides must be multiples of 4.
#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    pub arch: SegmenterArch,
    pub num_classes: usize,
    pub store: ParamStore<T>,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    e4: Conv2d,
    e5: Conv2d,
    d1: Conv2d,
    d2: Conv2d,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SegmenterTape<T> {
    x: Map<T>,
    a1: Map<T>,
    a2: Map<T>,
    a3: Map<T>,
    a4: Map<T>,
    a5: Map<T>,
    c1: Map<T>,
    b1: Map<T>,
    c2: Map<T>,
    b2: Map<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(num_classes: usize, arch: SegmenterArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let (w, w2) = (arch.width, 2 * arch.width);
        let e1 = Conv2d::new(&mut s, "e1", 5, w, 3, 1, 1, 1.0, &mut rng);
        let e2 = Conv2d::new(&mut s, "e2", w, w2, 3, 2, 1, 1.0, &mut rng);
        let e3 = Conv2d::new(&mut s, "e3", w2, w2, 3, 1, 1, 1.0, &mut rng);
        let e4 = Conv2d::new(&mut s, "e4", w2, w2, 3, 2, 1, 1.0, &mut rng);
        let e5 = Conv2d::new(&mut s, "e5", w2, w2, 3, 1, 1, 1.0, &mut rng);
        let d1 = Conv2d::new(&mut s, "d1", 2 * w2, w2, 3, 1, 1, 1.0, &mut rng);
        let d2 = Conv2d::linear(&mut s, "d2", w2 + w, w2, 1.0, &mut rng);
        let head = Conv2d::linear(&mut s, "head", w2, num_classes, 1.0, &mut rng);
        Segmenter { arch, num_classes, store: s, e1, e2, e3, e4, e5, d1, d2, head }
    }

    pub fn cast<U: Scalar>(&self) -> Segmenter<U> {
        Segmenter {
            arch: self.arch.clone(),
            num_classes: self.num_classes,
            store: self.store.cast(),
            e1: self.e1.clone(),
            e2: self.e2.clone(),
            e3: self.e3.clone(),
            e4: self.e4.clone(),
            e5: self.e5.clone(),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
            head: self.head.clone(),
        }
    }

    /// Per-pixel class logits, `[n, h, w, num_classes]`.
    pub fn forward(&self, images: &Map<T>) -> (Map<T>, SegmenterTape<T>) {
        assert!(images.h.is_multiple_of(4) && images.w.is_multiple_of(4), "segmenter input sides must be multiples of 4");
        let s = &self.store;
        let x = with_coords(images);
        let a1 = nn::leaky_relu(&self.e1.forward(s, &x));
        let a2 = nn::leaky_relu(&self.e2.forward(s, &a1));
        let a3 = nn::leaky_relu(&self.e3.forward(s, &a2));
        let a4 = nn::leaky_relu(&self.e4.forward(s, &a3));
        let a5 = nn::leaky_relu(&self.e5.forward(s, &a4));
        let c1 = nn::concat_channels(&nn::upsample2x(&a5), &a3);
        let b1 = nn::leaky_relu(&self.d1.forward(s, &c1));
        let c2 = nn::concat_channels(&nn::upsample2x(&b1), &a1);
        let b2 = nn::leaky_relu(&self.d2.forward(s, &c2));
        let logits = self.head.forward(s, &b2);
        (logits, SegmenterTape { x, a1, a2, a3, a4, a5, c1, b1, c2, b2 })
    }

    pub fn backward(&self, tape: &SegmenterTape<T>, dlogits: &Map<T>, grads: &mut Grads<T>) {
        let s = &self.store;
        let t = tape;
        let db2 = self.head.backward(s, &t.b2, dlogits, Some(grads), true).unwrap();
        let dc2 = self.d2.backward(s, &t.c2, &nn::leaky_relu_backward(&t.b2, &db2), Some(grads), true).unwrap();
        let (dup2, mut da1) = nn::split_channels(&dc2, 2 * self.arch.width);
        let db1 = nn::upsample2x_backward(&dup2);
        let dc1 = self.d1.backward(s, &t.c1, &nn::leaky_relu_backward(&t.b1, &db1), Some(grads), true).unwrap();
        let (dup1, mut da3) = nn::split_channels(&dc1, 2 * self.arch.width);
        let da5 = nn::upsample2x_backward(&dup1);
        let da4 = self.e5.backward(s, &t.a4, &nn::leaky_relu_backward(&t.a5, &da5), Some(grads), true).unwrap();
        let d = self.e4.backward(s, &t.a3, &nn::leaky_relu_backward(&t.a4, &da4), Some(grads), true).unwrap();
        da3.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += *b);
        let da2 = self.e3.backward(s, &t.a2, &nn::leaky_relu_backward(&t.a3, &da3), Some(grads), true).unwrap();
        let d = self.e2.backward(s, &t.a1, &nn::leaky_relu_backward(&t.a2, &da2), Some(grads), true).unwrap();
        da1.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += *b);
        self.e1.backward(s, &t.x, &nn::leaky_relu_backward(&t.a1, &da1), Some(grads), false);
    }

    /// Per-pixel class probabilities of one image, `h × w × num_classes`.
    pub fn probabilities(&self, image: &ImageTensor) -> Vec<f64> {
        let (logits, _) = self.forward(&image.to_map());
        logits
            .data
            .chunks(self.num_classes)
            .flat_map(|row| nn::softmax(row).into_iter().map(|v| v.as_f64()))
            .collect()
    }

    pub fn segment_batch(&self, images: &Map<T>) -> Result<Vec<SemanticMask>> {
        let (logits, _) = self.forward(images);
        let labels = argmax_rows(&logits.data, self.num_classes);
        let hw = images.h * images.w;
        labels
            .chunks(hw)
            .map(|l| {
                SemanticMask::new(images.h, images.w, self.num_classes, l.iter().map(|&c| (c + 1) as u8).collect())
            })
            .collect()
    }

    /// Argmax labels; ties resolve to the lowest class index.
    pub fn segment(&self, image: &ImageTensor) -> Result<SemanticMask> {
        if !image.height().is_multiple_of(4) || !image.width().is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "image is {}x{}, segmenter needs sides divisible by 4",
                image.height(),
                image.width()
            )));
        }
        Ok(self.segment_batch(&image.to_map())?.remove(0))
    }
}
