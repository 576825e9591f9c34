//! Parameter storage and the small set of layers the networks are built from.

use std::collections::HashMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tape::{ConvSpec, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors with a per-tensor trainable flag.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Id of the parameter at position `index` in insertion order.
    pub fn id_at(index: usize) -> ParamId {
        ParamId(index)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    /// Sets the flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, on: bool) {
        for (i, n) in self.names.iter().enumerate() {
            if n.starts_with(prefix) {
                self.trainable[i] = on;
            }
        }
    }

    /// Total scalar count over parameters matching `filter`.
    pub fn count(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.names.iter().zip(&self.values).filter(|(n, _)| filter(n)).map(|(_, v)| v.numel()).sum()
    }

    /// SHA-256 over the names and exact bit patterns of every parameter
    /// whose name starts with `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            if !n.starts_with(prefix) {
                continue;
            }
            h.update(n.as_bytes());
            for s in v.shape() {
                h.update((*s as u64).to_le_bytes());
            }
            for x in v.data() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies every `src_prefix*` tensor onto the matching `dst_prefix*` one.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) {
        let pairs: Vec<(usize, ParamId)> = self
            .names
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.strip_prefix(src_prefix)
                    .and_then(|rest| self.by_name.get(&format!("{dst_prefix}{rest}")))
                    .map(|&d| (i, d))
            })
            .collect();
        for (src, dst) in pairs {
            assert_eq!(self.values[src].shape(), self.values[dst.0].shape());
            self.values[dst.0] = self.values[src].clone();
        }
    }
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), uniform_init(&[out_dim, in_dim], in_dim, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform_init(&[out_dim], in_dim, rng)));
        Self { w, b, out_dim }
    }

    /// `x` is `[m, in]` or `[n, tokens, in]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w, false, true);
        match self.b {
            Some(b) => {
                let bv = tape.param(store, b);
                let mut shape = vec![1; tape.shape(y).len()];
                *shape.last_mut().unwrap() = self.out_dim;
                let br = tape.reshape(bv, &shape);
                tape.add(y, br)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: ConvSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let w = store.add(format!("{name}.weight"), uniform_init(&[out_ch, in_ch, kernel, kernel], fan_in, rng));
        let b = Some(store.add(format!("{name}.bias"), uniform_init(&[out_ch], fan_in, rng)));
        Self { w, b, spec: ConvSpec { stride, pad } }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.spec)
    }
}

/// Group normalisation over NCHW with a per-channel affine.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        let groups = largest_divisor_at_most(channels, groups);
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        Self { groups, gamma, beta, channels }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        assert_eq!(s[1], self.channels);
        let chunk = s[1] / self.groups * s[2] * s[3];
        let y = tape.normalize(x, chunk, 1e-5);
        let g = tape.param(store, self.gamma);
        let g = tape.reshape(g, &[1, self.channels, 1, 1]);
        let b = tape.param(store, self.beta);
        let b = tape.reshape(b, &[1, self.channels, 1, 1]);
        let y = tape.mul(y, g);
        tape.add(y, b)
    }
}

/// Layer normalisation over the last axis of `[n, tokens, dim]`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = tape.normalize(x, self.dim, 1e-5);
        let g = tape.param(store, self.gamma);
        let g = tape.reshape(g, &[1, 1, self.dim]);
        let b = tape.param(store, self.beta);
        let b = tape.reshape(b, &[1, 1, self.dim]);
        let y = tape.mul(y, g);
        tape.add(y, b)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checksum_tracks_values_and_prefix() {
        let mut s = ParamStore::new();
        let a = s.add("enc.a", Tensor::full(&[2], 1.0));
        s.add("dec.b", Tensor::full(&[2], 1.0));
        let before = s.checksum("enc.");
        s.value_mut(s.find("dec.b").unwrap()).data_mut()[0] = 5.0;
        assert_eq!(before, s.checksum("enc."));
        s.value_mut(a).data_mut()[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, s.checksum("enc."));
    }

    #[test]
    fn copy_prefix_matches_names() {
        let mut s = ParamStore::new();
        s.add("a.x", Tensor::full(&[2], 3.0));
        let b = s.add("b.x", Tensor::zeros(&[2]));
        s.copy_prefix("a.", "b.");
        assert_eq!(s.value(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn group_norm_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let gn = GroupNorm::new(&mut s, "gn", 4, 2);
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(&[1, 4, 3, 3], &mut rng).map(|v| 3.0 * v + 7.0));
        let y = gn.forward(&mut t, &s, x);
        let d = t.value(y).data();
        let first = &d[..18];
        let mean: f64 = first.iter().sum::<f64>() / 18.0;
        let var: f64 = first.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn divisor_fallback() {
        assert_eq!(largest_divisor_at_most(6, 4), 3);
        assert_eq!(largest_divisor_at_most(3, 8), 3);
        assert_eq!(largest_divisor_at_most(7, 4), 1);
    }
}
