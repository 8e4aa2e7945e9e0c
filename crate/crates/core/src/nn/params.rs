use std::collections::HashMap;

use rand::Rng;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::Scalar;
use crate::error::{Error, Result};

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    shape: Vec<usize>,
    value: Vec<T>,
}

/// Flat, named collection of the trainable tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(value.len(), shape.iter().product::<usize>(), "param {name}: bad length");
        assert!(self.entries.iter().all(|e| e.name != name), "duplicate param {name}");
        self.entries.push(Entry { name, shape: shape.to_vec(), value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform fan-in initialization, `U(-a, a)` with `a = gain * sqrt(3 / fan_in)`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> ParamId {
        let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
        let len = shape.iter().product();
        let value = (0..len).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
        self.add(name, shape, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let len = shape.iter().product();
        self.add(name, shape, vec![T::zero(); len])
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    value: e.value.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Copies every tensor of `other` into the identically named slot of `self`.
    pub fn load_from(&mut self, other: &NamedTensors) -> Result<()> {
        for e in &mut self.entries {
            let (shape, values) = other
                .get(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
            if *shape != e.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    e.name, shape, e.shape
                )));
            }
            e.value = values.iter().map(|&v| T::from_f64(v as f64)).collect();
        }
        Ok(())
    }

    pub fn to_named(&self, prefix: &str) -> NamedTensors {
        let mut out = NamedTensors::default();
        for e in &self.entries {
            out.insert(
                format!("{prefix}{}", e.name),
                e.shape.clone(),
                e.value.iter().map(|v| v.as_f64() as f32).collect(),
            );
        }
        out
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Grads { values: store.entries.iter().map(|e| vec![T::zero(); e.value.len()]).collect() }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn zero(&mut self) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.values {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<T>> {
        self.values.iter()
    }
}

/// Ordered name → (shape, f32 data) map; the on-disk tensor format.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    map: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl NamedTensors {
    pub fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f32>) {
        self.map.insert(name, (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f32>)> {
        self.map.get(name)
    }

    pub fn extend(&mut self, other: NamedTensors) {
        self.map.extend(other.map);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> NamedTensors {
        NamedTensors {
            map: self
                .map
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let mut names: Vec<&String> = self.map.keys().collect();
        names.sort();
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = names
            .into_iter()
            .map(|name| {
                let (shape, data) = &self.map[name];
                let raw = data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (name.clone(), shape.clone(), raw)
            })
            .collect();
        let views = bytes
            .iter()
            .map(|(name, shape, raw)| {
                TensorView::new(Dtype::F32, shape.clone(), raw)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_safetensors(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = NamedTensors::default();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
            }
            let data = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.insert(name, view.shape().to_vec(), data);
        }
        Ok(out)
    }
}

/// Adam moment state for one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0 }
    }

    /// One bias-corrected Adam update. Coordinates where `active` is false are
    /// left untouched, moments included.
    pub fn step(&mut self, cfg: &AdamConfig, params: &mut [T], grads: &[T], active: Option<&[bool]>) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one = T::one();
        let c1 = one - T::from_f64(cfg.beta1.powi(self.t as i32));
        let c2 = one - T::from_f64(cfg.beta2.powi(self.t as i32));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        for i in 0..params.len() {
            if let Some(mask) = active {
                if !mask[i] {
                    continue;
                }
            }
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        Adam { config, states: store.entries.iter().map(|e| AdamState::new(e.value.len())).collect() }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        for ((entry, g), st) in store.entries.iter_mut().zip(&grads.values).zip(&mut self.states) {
            st.step(&self.config, &mut entry.value, g, None);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    pub fn to_named(&self, store: &ParamStore<T>, prefix: &str) -> NamedTensors {
        let mut out = NamedTensors::default();
        for (e, st) in store.entries.iter().zip(&self.states) {
            let f = |v: &Vec<T>| v.iter().map(|x| x.as_f64() as f32).collect();
            out.insert(format!("{prefix}m.{}", e.name), e.shape.clone(), f(&st.m));
            out.insert(format!("{prefix}v.{}", e.name), e.shape.clone(), f(&st.v));
        }
        out.insert(format!("{prefix}t"), vec![1], vec![self.steps_taken() as f32]);
        out
    }

    pub fn load_named(&mut self, store: &ParamStore<T>, named: &NamedTensors, prefix: &str) -> Result<()> {
        let t = named
            .get(&format!("{prefix}t"))
            .and_then(|(_, d)| d.first().copied())
            .ok_or_else(|| Error::Checkpoint("optimizer step counter missing".into()))?;
        for (e, st) in store.entries.iter().zip(&mut self.states) {
            for (slot, key) in [(&mut st.m, "m"), (&mut st.v, "v")] {
                let (_, data) = named
                    .get(&format!("{prefix}{key}.{}", e.name))
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state for {} missing", e.name)))?;
                *slot = data.iter().map(|&v| T::from_f64(v as f64)).collect();
            }
            st.t = t as u64;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn safetensors_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.add_uniform("a.w", &[3, 4], 3, 1.0, &mut rng);
        store.add_zeros("a.b", &[4]);
        let bytes = store.to_named("").to_safetensors().unwrap();
        let back = NamedTensors::from_safetensors(&bytes).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add_zeros("a.w", &[3, 4]);
        other.add_zeros("a.b", &[4]);
        other.load_from(&back).unwrap();
        assert_eq!(other.to_named(""), store.to_named(""));
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.add_zeros("w", &[2, 2]);
        let mut named = NamedTensors::default();
        named.insert("w".into(), vec![4], vec![0.0; 4]);
        assert!(store.load_from(&named).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut st = AdamState::<f64>::new(2);
        let mut p = vec![1.0, -1.0];
        st.step(&cfg, &mut p, &[3.0, -0.5], None);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn adam_skips_inactive_coordinates() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut st = AdamState::<f32>::new(2);
        let mut p = vec![0.5, 0.5];
        st.step(&cfg, &mut p, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(p[1], 0.5);
        assert_eq!(st.m[1], 0.0);
        assert!(p[0] < 0.5);
    }
}
