use rand::Rng;

use super::{gemm, Grads, Map, ParamId, ParamStore, Scalar};

pub const LEAKY_SLOPE: f64 = 0.2;

/// 2-D convolution over NHWC maps, computed as im2col + GEMM.
///
/// Weights are stored `[k * k * cin, cout]` with the patch flattened in
/// `(ky, kx, ci)` order. `k = 1, stride = 1` skips the im2col copy, which
/// also makes this the dense layer for `[n, 1, 1, c]` vectors.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = k * k * cin;
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, cout], fan_in, gain, rng);
        let bias = store.add_zeros(format!("{name}.bias"), &[cout]);
        Conv2d { weight, bias, cin, cout, k, stride, pad }
    }

    pub fn linear<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, cin, cout, 1, 1, 0, gain, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Scalar>(&self, x: &Map<T>) -> Vec<T> {
        let (ho, wo) = self.out_hw(x.h, x.w);
        let row = self.k * self.k * x.c;
        let mut col = vec![T::zero(); x.n * ho * wo * row];
        for b in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = ((b * ho + oy) * wo + ox) * row;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = x.idx(b, iy as usize, ix as usize, 0);
                            let dst = r + (ky * self.k + kx) * x.c;
                            col[dst..dst + x.c].copy_from_slice(&x.data[src..src + x.c]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Scalar>(&self, dcol: &[T], x_shape: (usize, usize, usize, usize)) -> Map<T> {
        let (n, h, w, c) = x_shape;
        let mut dx = Map::zeros(n, h, w, c);
        let (ho, wo) = self.out_hw(h, w);
        let row = self.k * self.k * c;
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let r = ((b * ho + oy) * wo + ox) * row;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = dx.idx(b, iy as usize, ix as usize, 0);
                            let src = r + (ky * self.k + kx) * c;
                            for (d, s) in dx.data[dst..dst + c].iter_mut().zip(&dcol[src..src + c]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Map<T>) -> Map<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let rows = x.n * ho * wo;
        let bias = store.get(self.bias);
        let mut out = Vec::with_capacity(rows * self.cout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        let kk = self.k * self.k * self.cin;
        if self.is_pointwise() {
            gemm(false, false, rows, self.cout, kk, &x.data, store.get(self.weight), T::one(), &mut out);
        } else {
            let col = self.im2col(x);
            gemm(false, false, rows, self.cout, kk, &col, store.get(self.weight), T::one(), &mut out);
        }
        Map::from_vec(x.n, ho, wo, self.cout, out)
    }

    /// Backpropagates `dy` through the layer. Parameter gradients are
    /// accumulated into `grads` when given; the input gradient is returned
    /// when `need_input` is set.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Map<T>,
        dy: &Map<T>,
        grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Map<T>> {
        let rows = dy.pixels();
        let kk = self.k * self.k * self.cin;
        let col_owned;
        let col: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            col_owned = if grads.is_some() { self.im2col(x) } else { Vec::new() };
            &col_owned
        };
        if let Some(g) = grads {
            gemm(true, false, kk, self.cout, rows, col, &dy.data, T::one(), g.get_mut(self.weight));
            let db = g.get_mut(self.bias);
            for r in 0..rows {
                for (d, v) in db.iter_mut().zip(&dy.data[r * self.cout..(r + 1) * self.cout]) {
                    *d += *v;
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut dcol = vec![T::zero(); rows * kk];
        gemm(false, true, rows, kk, self.cout, &dy.data, store.get(self.weight), T::zero(), &mut dcol);
        if self.is_pointwise() {
            Some(Map::from_vec(x.n, x.h, x.w, x.c, dcol))
        } else {
            Some(self.col2im(&dcol, (x.n, x.h, x.w, x.c)))
        }
    }
}

pub fn leaky_relu<T: Scalar>(x: &Map<T>) -> Map<T> {
    let s = T::from_f64(LEAKY_SLOPE);
    let data = x.data.iter().map(|&v| if v > T::zero() { v } else { v * s }).collect();
    Map::from_vec(x.n, x.h, x.w, x.c, data)
}

/// Gradient of [`leaky_relu`]; `y` may be either the input or the output
/// since both share their sign.
pub fn leaky_relu_backward<T: Scalar>(y: &Map<T>, dy: &Map<T>) -> Map<T> {
    let s = T::from_f64(LEAKY_SLOPE);
    let data = y
        .data
        .iter()
        .zip(&dy.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { g * s })
        .collect();
    Map::from_vec(y.n, y.h, y.w, y.c, data)
}

pub fn tanh<T: Scalar>(x: &Map<T>) -> Map<T> {
    Map::from_vec(x.n, x.h, x.w, x.c, x.data.iter().map(|v| v.tanh()).collect())
}

pub fn tanh_backward<T: Scalar>(y: &Map<T>, dy: &Map<T>) -> Map<T> {
    let data = y.data.iter().zip(&dy.data).map(|(&v, &g)| g * (T::one() - v * v)).collect();
    Map::from_vec(y.n, y.h, y.w, y.c, data)
}

pub fn global_avg_pool<T: Scalar>(x: &Map<T>) -> Map<T> {
    let hw = x.h * x.w;
    let inv = T::one() / T::from_usize(hw);
    let mut out = vec![T::zero(); x.n * x.c];
    for b in 0..x.n {
        let acc = &mut out[b * x.c..(b + 1) * x.c];
        for p in 0..hw {
            for (a, v) in acc.iter_mut().zip(x.pixel(b * hw + p)) {
                *a += *v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Map::vectors(x.n, x.c, out)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Map<T>, h: usize, w: usize) -> Map<T> {
    let inv = T::one() / T::from_usize(h * w);
    let mut dx = Map::zeros(dy.n, h, w, dy.c);
    for b in 0..dy.n {
        let g = &dy.data[b * dy.c..(b + 1) * dy.c];
        for p in 0..h * w {
            let o = (b * h * w + p) * dy.c;
            for (d, v) in dx.data[o..o + dy.c].iter_mut().zip(g) {
                *d = *v * inv;
            }
        }
    }
    dx
}

pub fn upsample2x<T: Scalar>(x: &Map<T>) -> Map<T> {
    let mut out = Map::zeros(x.n, x.h * 2, x.w * 2, x.c);
    for b in 0..x.n {
        for y in 0..out.h {
            for xx in 0..out.w {
                let s = x.idx(b, y / 2, xx / 2, 0);
                let d = out.idx(b, y, xx, 0);
                out.data[d..d + x.c].copy_from_slice(&x.data[s..s + x.c]);
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(dy: &Map<T>) -> Map<T> {
    let mut dx = Map::zeros(dy.n, dy.h / 2, dy.w / 2, dy.c);
    for b in 0..dy.n {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let s = dy.idx(b, y, xx, 0);
                let d = dx.idx(b, y / 2, xx / 2, 0);
                for ch in 0..dy.c {
                    dx.data[d + ch] += dy.data[s + ch];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Scalar>(a: &Map<T>, b: &Map<T>) -> Map<T> {
    assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat spatial mismatch");
    let c = a.c + b.c;
    let mut data = Vec::with_capacity(a.pixels() * c);
    for p in 0..a.pixels() {
        data.extend_from_slice(a.pixel(p));
        data.extend_from_slice(b.pixel(p));
    }
    Map::from_vec(a.n, a.h, a.w, c, data)
}

pub fn split_channels<T: Scalar>(d: &Map<T>, ca: usize) -> (Map<T>, Map<T>) {
    let cb = d.c - ca;
    let mut a = Vec::with_capacity(d.pixels() * ca);
    let mut b = Vec::with_capacity(d.pixels() * cb);
    for p in 0..d.pixels() {
        let px = d.pixel(p);
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    (Map::from_vec(d.n, d.h, d.w, ca, a), Map::from_vec(d.n, d.h, d.w, cb, b))
}

/// Numerically stable softmax of one logit row.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Map<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Map::from_vec(n, h, w, c, (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Directional derivative of `<probe, conv(x)>` against central differences.
    fn check_conv(k: usize, stride: usize, pad: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, k, stride, pad, 1.0, &mut rng);
        store.get_mut(conv.bias).iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x = random_map(2, 7, 6, 3, 1);
        let y = conv.forward(&store, &x);
        let probe = random_map(y.n, y.h, y.w, y.c, 2);
        let mut grads = Grads::zeros_like(&store);
        let dx = conv.backward(&store, &x, &probe, Some(&mut grads), true).unwrap();
        let f = |s: &ParamStore<f64>, x: &Map<f64>| dot(&conv.forward(s, x).data, &probe.data);

        let dir = random_map(x.n, x.h, x.w, x.c, 3);
        let h = 1e-6;
        let plus = Map::from_vec(x.n, x.h, x.w, x.c, x.data.iter().zip(&dir.data).map(|(a, d)| a + h * d).collect());
        let minus = Map::from_vec(x.n, x.h, x.w, x.c, x.data.iter().zip(&dir.data).map(|(a, d)| a - h * d).collect());
        let fd = (f(&store, &plus) - f(&store, &minus)) / (2.0 * h);
        let an = dot(&dx.data, &dir.data);
        assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "input grad {fd} vs {an}");

        for id in [conv.weight, conv.bias] {
            let base = store.get(id).to_vec();
            let dirw: Vec<f64> = (0..base.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut sp = store.clone();
            sp.get_mut(id).iter_mut().zip(&dirw).for_each(|(v, d)| *v += h * d);
            let mut sm = store.clone();
            sm.get_mut(id).iter_mut().zip(&dirw).for_each(|(v, d)| *v -= h * d);
            let fd = (f(&sp, &x) - f(&sm, &x)) / (2.0 * h);
            let an = dot(grads.get(id), &dirw);
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "param grad {fd} vs {an}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        check_conv(3, 1, 1);
        check_conv(3, 2, 1);
        check_conv(1, 1, 0);
    }

    #[test]
    fn conv_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 8, 3, 2, 1, 1.0, &mut rng);
        assert_eq!(conv.out_hw(64, 64), (32, 32));
        assert_eq!(conv.out_hw(7, 6), (4, 3));
    }

    #[test]
    fn upsample_and_pool_adjoints() {
        let x = random_map(2, 3, 4, 2, 4);
        let dy = random_map(2, 6, 8, 2, 5);
        let lhs = dot(&upsample2x(&x).data, &dy.data);
        let rhs = dot(&x.data, &upsample2x_backward(&dy).data);
        assert!((lhs - rhs).abs() < 1e-12);

        let dp = random_map(2, 1, 1, 2, 6);
        let lhs = dot(&global_avg_pool(&x).data, &dp.data);
        let rhs = dot(&x.data, &global_avg_pool_backward(&dp, 3, 4).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn concat_split_round_trip() {
        let a = random_map(1, 2, 2, 3, 8);
        let b = random_map(1, 2, 2, 2, 9);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn softmax_is_stable_and_normalized() {
        let p = softmax(&[1000.0f64, 1000.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        let ls = log_softmax(&[0.0f64, 2.0_f64.ln()]);
        assert!((ls[1] - (2.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((sigmoid(-800.0f64)).abs() < 1e-300);
    }
}
