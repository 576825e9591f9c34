//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and leaves
//! gradients on the leaves and parameters that asked for them. Nodes whose
//! inputs never require a gradient are skipped entirely, so frozen
//! sub-networks cost a forward pass only.

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Expm1,
    Log1p,
    Sqrt,
    Silu,
    Sigmoid,
    Relu,
    Square,
    Abs,
    /// `ln(1 + mu x) / ln(1 + mu)`.
    MuLaw(f64),
    Clamp(f64, f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Expm1 => x.exp_m1(),
            Unary::Log1p => x.ln_1p(),
            Unary::Sqrt => x.sqrt(),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(0.0),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::MuLaw(mu) => (mu * x).ln_1p() / mu.ln_1p(),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Expm1 => y + 1.0,
            Unary::Log1p => 1.0 / (1.0 + x),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Abs => {
                // subgradient at the kink is 0
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::MuLaw(mu) => mu / ((1.0 + mu * x) * mu.ln_1p()),
            Unary::Clamp(lo, hi) => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf,
    Param,
    Unary(Var, Unary),
    /// `b` broadcasts to the shape of `a`.
    Binary(Var, Var, Binary),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Upsample2x(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Normalize { x: Var, chunk: usize, inv_std: Vec<f64> },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    ReduceTo(Var),
    SumAll(Var),
    ForwardDiff { x: Var, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_node[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.by_node[v.0].as_ref())
    }

    /// Moves parameter gradients out, keyed by parameter id.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, Tensor> {
        let mut out = HashMap::with_capacity(self.params.len());
        for (id, v) in &self.params {
            if let Some(g) = self.by_node[v.0].take() {
                out.insert(*id, g);
            }
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input that gradients are collected for.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The current value of a stored parameter. Frozen parameters enter the
    /// tape as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let out = self.value(x).map(|v| kind.apply(v));
        let r = self.req(x);
        self.push(out, Op::Unary(x, kind), r)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn expm1(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Expm1)
    }
    pub fn log1p(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log1p)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let map = broadcast_map(av.shape(), bv.shape());
        let ad = av.data();
        let bd = bv.data();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<f64> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data);
        let r = self.req(a) || self.req(b);
        self.push(out, Op::Binary(a, b, kind), r)
    }

    /// `a + b`, with `b` broadcast to `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let r = self.req(x);
        self.push(out, Op::Scale(x, s), r)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v + s);
        let r = self.req(x);
        self.push(out, Op::AddScalar(x), r)
    }

    /// Batched matrix product of rank-2 or rank-3 operands. A rank-2 `b` is
    /// shared across the batch of `a`. `ta`/`tb` transpose the last two axes.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, am) = mat_view(av, ta);
        let (bbatch, bm) = mat_view(bv, tb);
        assert!(bbatch == batch || bv.rank() == 2, "matmul batch mismatch {:?} x {:?}", av.shape(), bv.shape());
        assert_eq!(am.cols, bm.rows, "matmul inner mismatch {:?} x {:?} (ta={ta}, tb={tb})", av.shape(), bv.shape());
        let (m, n) = (am.rows, bm.cols);
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ao = i * am.rows * am.cols;
            let bo = if bv.rank() == 2 { 0 } else { i * bm.rows * bm.cols };
            gemm(
                &am.with_offset(av.data(), ao),
                &bm.with_offset(bv.data(), bo),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                0.0,
            );
        }
        let shape = if av.rank() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let r = self.req(a) || self.req(b);
        self.push(Tensor::new(shape, out), Op::Matmul { a, b, ta, tb }, r)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let r = self.req(x);
        self.push(out, Op::Softmax(x), r)
    }

    /// 2-D convolution: `x` is `[n, ci, h, w]`, `w` is `[co, ci, kh, kw]`,
    /// `b` is `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), spec);
        let mut out = vec![0.0; geo.n * geo.co * geo.p()];
        let mut col = Vec::new();
        for i in 0..geo.n {
            let xs = &xv.data()[i * geo.in_len()..(i + 1) * geo.in_len()];
            let cols: &[f64] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut col);
                &col
            };
            let wm = MatRef { data: wv.data(), rows: geo.co, cols: geo.k(), rs: geo.k() as isize, cs: 1 };
            let cm = MatRef { data: cols, rows: geo.k(), cols: geo.p(), rs: geo.p() as isize, cs: 1 };
            gemm(&wm, &cm, &mut out[i * geo.co * geo.p()..(i + 1) * geo.co * geo.p()], geo.p(), 0.0);
        }
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.numel(), geo.co);
            let p = geo.p();
            for (j, chunk) in out.chunks_mut(p).enumerate() {
                let bias = bv.data()[j % geo.co];
                for v in chunk {
                    *v += bias;
                }
            }
        }
        let out = Tensor::new(vec![geo.n, geo.co, geo.oh, geo.ow], out);
        let r = self.req(x) || self.req(w) || b.is_some_and(|b| self.req(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, r)
    }

    /// Nearest-neighbour 2x upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
        let mut out = vec![0.0; nc * 4 * h * w];
        for p in 0..nc {
            let src = &xv.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out);
        let r = self.req(x);
        self.push(out, Op::Upsample2x(x), r)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch {s:?} vs {first:?} on axis {axis}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let block: usize = v.shape()[axis..].iter().product();
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let r = parts.iter().any(|&p| self.req(p));
        self.push(Tensor::new(shape, data), Op::Concat { parts: parts.to_vec(), axis }, r)
    }

    /// Zero-mean, unit-variance normalisation of consecutive chunks of
    /// `chunk` elements (group norm over NCHW, layer norm over the last axis).
    pub fn normalize(&mut self, x: Var, chunk: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.numel() % chunk, 0);
        let mut out = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(xv.numel() / chunk);
        for c in out.chunks_mut(chunk) {
            let mean = c.iter().sum::<f64>() / chunk as f64;
            let var = c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in c.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        let r = self.req(x);
        self.push(out, Op::Normalize { x, chunk, inv_std }, r)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let r = self.req(x);
        self.push(out, Op::Reshape(x), r)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        let r = self.req(x);
        self.push(out, Op::Permute { x, perm: perm.to_vec() }, r)
    }

    /// Sums `x` down to `shape`, whose axes are either 1 or equal to `x`'s.
    pub fn reduce_to(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let map = broadcast_map(xv.shape(), shape);
        let n: usize = shape.iter().product();
        let mut out = vec![0.0; n];
        match map {
            None => out.copy_from_slice(xv.data()),
            Some(m) => {
                for (&v, &j) in xv.data().iter().zip(&m) {
                    out[j] += v;
                }
            }
        }
        let r = self.req(x);
        self.push(Tensor::new(shape.to_vec(), out), Op::ReduceTo(x), r)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let r = self.req(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), r)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `y[i] = x[i+1] - x[i]` along `axis`, with 0 in the last position.
    pub fn forward_diff(&mut self, x: Var, axis: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        let mut out = vec![0.0; xv.numel()];
        let d = xv.data();
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..len.saturating_sub(1) {
                for k in 0..inner {
                    let a = base + i * inner + k;
                    out[a] = d[a + inner] - d[a];
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out);
        let r = self.req(x);
        self.push(out, Op::ForwardDiff { x, axis }, r)
    }

    /// Accumulates gradients of the scalar `loss` into every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let g = if keep {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backprop(node, &g, &mut grads);
        }
        Gradients { by_node: grads, params: self.params.clone() }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.req(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Unary(x, kind) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                    .collect();
                self.acc(grads, *x, Tensor::new(xv.shape().to_vec(), data));
            }
            Op::Binary(a, b, kind) => self.backprop_binary(*a, *b, *kind, g, grads),
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Matmul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Softmax(x) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((yr, gr), or) in y.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in or.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), out));
            }
            Op::Conv2d { x, w, b, spec } => self.backprop_conv(*x, *w, *b, *spec, g, grads),
            Op::Upsample2x(x) => {
                let s = self.shape(*x).to_vec();
                let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut out = vec![0.0; nc * h * w];
                for p in 0..nc {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut out[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, out));
            }
            Op::Concat { parts, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let blocks: Vec<usize> =
                    parts.iter().map(|&p| self.shape(p)[*axis..].iter().product()).collect();
                let mut outs: Vec<Vec<f64>> = parts.iter().map(|&p| Vec::with_capacity(self.value(p).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, &blk) in blocks.iter().enumerate() {
                        outs[k].extend_from_slice(&g.data()[off..off + blk]);
                        off += blk;
                    }
                }
                for (&p, data) in parts.iter().zip(outs) {
                    self.acc(grads, p, Tensor::new(self.shape(p).to_vec(), data));
                }
            }
            Op::Normalize { x, chunk, inv_std } => {
                let y = &node.value;
                let mut out = vec![0.0; y.numel()];
                let n = *chunk as f64;
                for (((yc, gc), oc), &inv) in
                    y.data().chunks(*chunk).zip(g.data().chunks(*chunk)).zip(out.chunks_mut(*chunk)).zip(inv_std)
                {
                    let gm = gc.iter().sum::<f64>() / n;
                    let gy = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, &yi), &gi) in oc.iter_mut().zip(yc).zip(gc) {
                        *o = inv * (gi - gm - yi * gy);
                    }
                }
                self.acc(grads, *x, Tensor::new(y.shape().to_vec(), out));
            }
            Op::Reshape(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, g.clone().reshape(&s));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc(grads, *x, permute_tensor(g, &inv));
            }
            Op::ReduceTo(x) => {
                let s = self.shape(*x).to_vec();
                let map = broadcast_map(&s, g.shape());
                let out = match map {
                    None => g.clone().reshape(&s),
                    Some(m) => Tensor::new(s, m.iter().map(|&j| g.data()[j]).collect()),
                };
                self.acc(grads, *x, out);
            }
            Op::SumAll(x) => {
                let s = self.shape(*x).to_vec();
                self.acc(grads, *x, Tensor::full(&s, g.item()));
            }
            Op::ForwardDiff { x, axis } => {
                let s = self.shape(*x).to_vec();
                let len = s[*axis];
                let inner: usize = s[*axis + 1..].iter().product();
                let outer: usize = s[..*axis].iter().product();
                let mut out = vec![0.0; g.numel()];
                let gd = g.data();
                for o in 0..outer {
                    let base = o * len * inner;
                    for i in 0..len.saturating_sub(1) {
                        for k in 0..inner {
                            let a = base + i * inner + k;
                            out[a] -= gd[a];
                            out[a + inner] += gd[a];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, out));
            }
        }
    }

    fn backprop_binary(&self, a: Var, b: Var, kind: Binary, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let map = broadcast_map(av.shape(), bv.shape());
        let bidx = |i: usize| map.as_ref().map_or(i, |m| m[i]);
        let ad = av.data();
        let bd = bv.data();
        let gd = g.data();
        if self.req(a) {
            let data = (0..ad.len())
                .map(|i| match kind {
                    Binary::Add | Binary::Sub => gd[i],
                    Binary::Mul => gd[i] * bd[bidx(i)],
                    Binary::Div => gd[i] / bd[bidx(i)],
                })
                .collect();
            self.acc(grads, a, Tensor::new(av.shape().to_vec(), data));
        }
        if self.req(b) {
            let mut out = vec![0.0; bv.numel()];
            for i in 0..ad.len() {
                let j = bidx(i);
                out[j] += match kind {
                    Binary::Add => gd[i],
                    Binary::Sub => -gd[i],
                    Binary::Mul => gd[i] * ad[i],
                    Binary::Div => -gd[i] * ad[i] / (bd[j] * bd[j]),
                };
            }
            self.acc(grads, b, Tensor::new(bv.shape().to_vec(), out));
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, am) = mat_view(av, ta);
        let (_, bm) = mat_view(bv, tb);
        let (m, k, n) = (am.rows, am.cols, bm.cols);
        let shared_b = bv.rank() == 2 && batch > 1 || (bv.rank() == 2 && av.rank() == 3);
        let gview = |i: usize, trans: bool| {
            let base = MatRef { data: g.data(), rows: m, cols: n, rs: n as isize, cs: 1 };
            let v = base.with_offset(g.data(), i * m * n);
            if trans {
                v.t()
            } else {
                v
            }
        };
        if self.req(a) {
            // storage of a is (m x k) or (k x m) when transposed
            let mut out = vec![0.0; av.numel()];
            for i in 0..batch {
                let bo = if bv.rank() == 2 { 0 } else { i * k * n };
                let bl = bm.with_offset(bv.data(), bo);
                let dst = &mut out[i * m * k..(i + 1) * m * k];
                if ta {
                    // dA^T = B G^T : (k x n)(n x m)
                    gemm(&bl, &gview(i, true), dst, m, 0.0);
                } else {
                    // dA = G B^T : (m x n)(n x k)
                    gemm(&gview(i, false), &bl.t(), dst, k, 0.0);
                }
            }
            self.acc(grads, a, Tensor::new(av.shape().to_vec(), out));
        }
        if self.req(b) {
            let mut out = vec![0.0; bv.numel()];
            for i in 0..batch {
                let al = am.with_offset(av.data(), i * m * k);
                let dst_off = if shared_b { 0 } else { i * k * n };
                let dst = &mut out[dst_off..dst_off + k * n];
                let beta = if shared_b && i > 0 { 1.0 } else { 0.0 };
                if tb {
                    // dB^T = G^T A : (n x m)(m x k)
                    gemm(&gview(i, true), &al, dst, k, beta);
                } else {
                    // dB = A^T G : (k x m)(m x n)
                    gemm(&al.t(), &gview(i, false), dst, n, beta);
                }
            }
            self.acc(grads, b, Tensor::new(bv.shape().to_vec(), out));
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = self.value(x);
        let wv = self.value(w);
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), spec);
        let (k, p, co) = (geo.k(), geo.p(), geo.co);
        if let Some(b) = b {
            if self.req(b) {
                let mut db = vec![0.0; co];
                for (j, chunk) in g.data().chunks(p).enumerate() {
                    db[j % co] += chunk.iter().sum::<f64>();
                }
                self.acc(grads, b, Tensor::new(vec![co], db));
            }
        }
        let need_w = self.req(w);
        let need_x = self.req(x);
        let mut dw = vec![0.0; wv.numel()];
        let mut dx = if need_x { vec![0.0; xv.numel()] } else { Vec::new() };
        let mut col = Vec::new();
        let mut dcol = vec![0.0; if need_x && !geo.is_pointwise() { k * p } else { 0 }];
        for i in 0..geo.n {
            let gm = MatRef { data: &g.data()[i * co * p..(i + 1) * co * p], rows: co, cols: p, rs: p as isize, cs: 1 };
            if need_w {
                let xs = &xv.data()[i * geo.in_len()..(i + 1) * geo.in_len()];
                let cols: &[f64] = if geo.is_pointwise() {
                    xs
                } else {
                    geo.im2col(xs, &mut col);
                    &col
                };
                let cm = MatRef { data: cols, rows: k, cols: p, rs: p as isize, cs: 1 };
                gemm(&gm, &cm.t(), &mut dw, k, if i == 0 { 0.0 } else { 1.0 });
            }
            if need_x {
                let wm = MatRef { data: wv.data(), rows: co, cols: k, rs: k as isize, cs: 1 };
                let dxs = &mut dx[i * geo.in_len()..(i + 1) * geo.in_len()];
                if geo.is_pointwise() {
                    gemm(&wm.t(), &gm, dxs, p, 0.0);
                } else {
                    gemm(&wm.t(), &gm, &mut dcol, p, 0.0);
                    geo.col2im(&dcol, dxs);
                }
            }
        }
        if need_w {
            self.acc(grads, w, Tensor::new(wv.shape().to_vec(), dw));
        }
        if need_x {
            self.acc(grads, x, Tensor::new(xv.shape().to_vec(), dx));
        }
    }
}

/// For each element of a tensor shaped `full`, the flat index of the
/// corresponding element of a tensor shaped `part` (axes of `part` are 1 or
/// equal). `None` when the shapes are identical.
fn broadcast_map(full: &[usize], part: &[usize]) -> Option<Vec<usize>> {
    if full == part {
        return None;
    }
    assert_eq!(full.len(), part.len(), "broadcast rank mismatch {full:?} vs {part:?}");
    for (&f, &p) in full.iter().zip(part) {
        assert!(p == f || p == 1, "cannot broadcast {part:?} to {full:?}");
    }
    let ps = strides(part);
    let eff: Vec<usize> = part.iter().zip(&ps).map(|(&d, &s)| if d == 1 { 0 } else { s }).collect();
    let n: usize = full.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = full.len();
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    for _ in 0..n {
        out.push(idx);
        for d in (0..rank).rev() {
            coord[d] += 1;
            idx += eff[d];
            if coord[d] < full[d] {
                break;
            }
            idx -= eff[d] * coord[d];
            coord[d] = 0;
        }
    }
    Some(out)
}

pub(crate) fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape();
    assert_eq!(perm.len(), s.len());
    let in_strides = strides(s);
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let rank = s.len();
    let mut coord = vec![0usize; rank];
    let mut idx = 0usize;
    let d = t.data();
    for _ in 0..n {
        out.push(d[idx]);
        for k in (0..rank).rev() {
            coord[k] += 1;
            idx += src_strides[k];
            if coord[k] < out_shape[k] {
                break;
            }
            idx -= src_strides[k] * coord[k];
            coord[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

#[derive(Clone, Copy)]
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    fn t(self) -> Self {
        MatRef { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn with_offset<'b>(&self, data: &'b [f64], off: usize) -> MatRef<'b> {
        MatRef { data: &data[off..], rows: self.rows, cols: self.cols, rs: self.rs, cs: self.cs }
    }
}

/// Logical (possibly transposed) matrix view of the last two axes.
fn mat_view(t: &Tensor, trans: bool) -> (usize, MatRef<'_>) {
    let s = t.shape();
    let (batch, r, c) = match s.len() {
        2 => (1, s[0], s[1]),
        3 => (s[0], s[1], s[2]),
        _ => panic!("matmul operand must be rank 2 or 3, got {s:?}"),
    };
    let m = MatRef { data: t.data(), rows: r, cols: c, rs: c as isize, cs: 1 };
    (batch, if trans { m.t() } else { m })
}

/// `c = a * b + beta * c`, with `c` row-major with `ldc` columns.
fn gemm(a: &MatRef, b: &MatRef, c: &mut [f64], ldc: usize, beta: f64) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(ldc, n);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let need = |r: usize, cc: usize, rs: isize, cs: isize| (r - 1) as isize * rs + (cc - 1) as isize * cs;
    assert!((need(m, k, a.rs, a.cs) as usize) < a.data.len());
    assert!((need(k, n, b.rs, b.cs) as usize) < b.data.len());
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    spec: ConvSpec,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: ConvSpec) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be NCHW, got {x:?}");
        assert_eq!(w.len(), 4);
        assert_eq!(x[1], w[1], "conv2d channel mismatch: input {x:?}, weight {w:?}");
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        Self { n: x[0], ci: x[1], h, w: wd, co: w[0], kh, kw, oh, ow, spec }
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.ci * self.h * self.w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.pad == 0
    }

    fn im2col(&self, x: &[f64], col: &mut Vec<f64>) {
        let p = self.p();
        col.clear();
        col.resize(self.k() * p, 0.0);
        let (s, pad) = (self.spec.stride as isize, self.spec.pad as isize);
        for c in 0..self.ci {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let p = self.p();
        let (s, pad) = (self.spec.stride as isize, self.spec.pad as isize);
        for c in 0..self.ci {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = oy as isize * s + ki as isize - pad;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = ox as isize * s + kj as isize - pad;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x) * probe))/dx for every input
    /// element.
    fn check_grad(inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|t| tape.leaf(t)).collect();
        let y = f(&mut tape, &vars);
        let probe = Tensor::randn(tape.shape(y), &mut rng);
        let pv = tape.constant(probe.clone());
        let prod = tape.mul(y, pv);
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss);

        let eval = |ins: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().cloned().map(|x| t.constant(x)).collect();
            let y = f(&mut t, &vs);
            t.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for i in 0..input.numel() {
                let mut plus = inputs.clone();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[which].data_mut()[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-5, "input {which} elem {i}: analytic {a} vs numeric {numeric}");
            }
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape, &mut rng)
    }

    #[test]
    fn unary_gradients() {
        for kind in [Unary::Exp, Unary::Expm1, Unary::Silu, Unary::Sigmoid, Unary::Square] {
            check_grad(vec![rand_t(&[3, 4], 1)], |t, v| t.unary(v[0], kind));
        }
        let pos = rand_t(&[3, 4], 2).map(|v| v.abs() * 0.4 + 0.05);
        for kind in [Unary::Log1p, Unary::Sqrt, Unary::MuLaw(5000.0), Unary::Abs] {
            check_grad(vec![pos.clone()], |t, v| t.unary(v[0], kind));
        }
    }

    #[test]
    fn broadcast_binary_gradients() {
        let a = rand_t(&[2, 3, 4, 5], 3);
        let shapes: [&[usize]; 4] = [&[2, 3, 4, 5], &[1, 3, 1, 1], &[2, 1, 4, 5], &[2, 3, 1, 1]];
        for (i, s) in shapes.iter().enumerate() {
            let b = rand_t(s, 10 + i as u64).map(|v| v.abs() + 0.5);
            check_grad(vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
            check_grad(vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
            check_grad(vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
            check_grad(vec![a.clone(), b.clone()], |t, v| t.div(v[0], v[1]));
        }
    }

    #[test]
    fn matmul_gradients_all_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rand_t(&[2, 4, 3], 4) } else { rand_t(&[2, 3, 4], 4) };
            let b = if tb { rand_t(&[2, 5, 4], 5) } else { rand_t(&[2, 4, 5], 5) };
            check_grad(vec![a, b], |t, v| t.matmul(v[0], v[1], ta, tb));
            let a = if ta { rand_t(&[2, 4, 3], 6) } else { rand_t(&[2, 3, 4], 6) };
            let b = if tb { rand_t(&[5, 4], 7) } else { rand_t(&[4, 5], 7) };
            check_grad(vec![a, b], |t, v| t.matmul(v[0], v[1], ta, tb));
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let a = rand_t(&[3, 4], 8);
        let b = rand_t(&[4, 2], 9);
        let mut t = Tape::new();
        let (av, bv) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(av, bv, false, false);
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 2 + j]).sum();
                assert!((t.value(c).data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_gradients() {
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let x = rand_t(&[2, 3, 6, 6], 11);
            let w = rand_t(&[4, 3, k, k], 12);
            let b = rand_t(&[4], 13);
            check_grad(vec![x, w, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), ConvSpec { stride, pad }));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = rand_t(&[1, 2, 5, 5], 14);
        let w = rand_t(&[3, 2, 3, 3], 15);
        let mut t = Tape::new();
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        let y = t.conv2d(xv, wv, None, ConvSpec { stride: 2, pad: 1 });
        assert_eq!(t.shape(y), &[1, 3, 3, 3]);
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let iy = (oy * 2 + ki) as isize - 1;
                                let ix = (ox * 2 + kj) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[c * 25 + iy as usize * 5 + ix as usize]
                                        * w.data()[((o * 2 + c) * 3 + ki) * 3 + kj];
                                }
                            }
                        }
                    }
                    assert!((t.value(y).data()[o * 9 + oy * 3 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn structural_op_gradients() {
        let x = rand_t(&[2, 3, 4, 4], 16);
        check_grad(vec![x.clone()], |t, v| t.upsample2x(v[0]));
        check_grad(vec![x.clone()], |t, v| t.normalize(v[0], 16, 1e-5));
        check_grad(vec![x.clone()], |t, v| t.permute(v[0], &[0, 2, 3, 1]));
        check_grad(vec![x.clone()], |t, v| t.reduce_to(v[0], &[2, 1, 4, 4]));
        check_grad(vec![x.clone()], |t, v| t.forward_diff(v[0], 3));
        check_grad(vec![x.clone()], |t, v| t.forward_diff(v[0], 2));
        check_grad(vec![rand_t(&[2, 3, 5], 17)], |t, v| t.softmax(v[0]));
        let y = rand_t(&[2, 2, 4, 4], 18);
        check_grad(vec![x, y], |t, v| t.concat(&[v[0], v[1]], 1));
    }

    #[test]
    fn frozen_inputs_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(2.0));
        let b = t.leaf(Tensor::scalar(3.0));
        let c = t.mul(a, b);
        let g = t.backward(c);
        assert!(g.wrt(a).is_none());
        assert_eq!(g.wrt(b).unwrap().item(), 2.0);
    }

    #[test]
    fn permute_roundtrip() {
        let x = rand_t(&[2, 3, 4], 19);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(permute_tensor(&p, &[1, 2, 0]), x);
    }
}
