use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{strip_coords, with_coords};
use crate::nn::{self, Conv2d, Grads, Map, ParamStore, Scalar};
use crate::synth::PixelRect;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneArch {
    /// Channel widths of the 3×3 conv layers; the first three downsample by 2.
    pub widths: Vec<usize>,
}

impl Default for BackboneArch {
    fn default() -> Self {
        BackboneArch { widths: vec![16, 32, 32, 32] }
    }
}

/// Region of the input a model is allowed to see; pixels outside are zeroed
/// before the network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Visibility {
    pub name: String,
    pub rect: Option<PixelRect>,
}

impl Visibility {
    pub fn full() -> Self {
        Visibility { name: "full".into(), rect: None }
    }

    pub fn region(name: &str, rect: PixelRect) -> Self {
        Visibility { name: name.into(), rect: Some(rect) }
    }

    pub fn sees(&self, y: usize, x: usize) -> bool {
        self.rect.is_none_or(|r| r.contains(y, x))
    }

    pub fn apply<T: Scalar>(&self, x: &Map<T>) -> Map<T> {
        let mut out = x.clone();
        if self.rect.is_some() {
            for b in 0..x.n {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        if !self.sees(y, xx) {
                            let o = x.idx(b, y, xx, 0);
                            out.data[o..o + x.c].iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                }
            }
        }
        out
    }
}

/// Strided conv stack, global average pooling and a linear head; shared by
/// the decision models, the identity embedder and the attribute oracle.
#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub arch: BackboneArch,
    pub outputs: usize,
    pub visibility: Visibility,
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct BackboneTape<T> {
    acts: Vec<Map<T>>,
    pooled: Map<T>,
}

impl<T> BackboneTape<T> {
    /// Pooled penultimate features, `n × width`.
    pub fn features(&self) -> &[T] {
        &self.pooled.data
    }
}

impl<T: Scalar> Backbone<T> {
    pub fn new(arch: BackboneArch, outputs: usize, visibility: Visibility, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut cin = 5;
        for (i, &w) in arch.widths.iter().enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            convs.push(Conv2d::new(&mut store, &format!("conv{i}"), cin, w, 3, stride, 1, 1.0, &mut rng));
            cin = w;
        }
        let head = Conv2d::linear(&mut store, "head", cin, outputs, 1.0, &mut rng);
        Backbone { arch, outputs, visibility, store, convs, head }
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            arch: self.arch.clone(),
            outputs: self.outputs,
            visibility: self.visibility.clone(),
            store: self.store.cast(),
            convs: self.convs.clone(),
            head: self.head.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.arch.widths.last().expect("backbone without layers")
    }

    /// Raw head outputs, `n × outputs`.
    pub fn forward(&self, images: &Map<T>) -> (Vec<T>, BackboneTape<T>) {
        assert_eq!(images.c, 3, "backbone expects RGB input");
        let mut acts = vec![with_coords(&self.visibility.apply(images))];
        for conv in &self.convs {
            let next = nn::leaky_relu(&conv.forward(&self.store, acts.last().unwrap()));
            acts.push(next);
        }
        let pooled = nn::global_avg_pool(acts.last().unwrap());
        let out = self.head.forward(&self.store, &pooled).data;
        (out, BackboneTape { acts, pooled })
    }

    /// Backpropagates head-output gradients. Returns the gradient with
    /// respect to the RGB input when `need_input` is set; it is zero outside
    /// the visible region.
    pub fn backward(
        &self,
        tape: &BackboneTape<T>,
        dout: &[T],
        mut grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Map<T>> {
        let dout = Map::vectors(tape.pooled.n, self.outputs, dout.to_vec());
        let dpooled = self.head.backward(&self.store, &tape.pooled, &dout, grads.as_deref_mut(), true).unwrap();
        let last = tape.acts.last().unwrap();
        let mut d = nn::global_avg_pool_backward(&dpooled, last.h, last.w);
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let dpre = nn::leaky_relu_backward(&tape.acts[i + 1], &d);
            let need = i > 0 || need_input;
            {
                let dx = conv.backward(&self.store, &tape.acts[i], &dpre, grads.as_deref_mut(), need)?;
                d = dx
            }
        }
        Some(self.visibility.apply(&strip_coords(&d)))
    }
}
