//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape itself is a
//! topological order and `backward` is a single reverse sweep.

use std::cell::Cell;
use std::collections::{BTreeSet, HashMap};

use super::kernels::{self, ConvGeom, LinearTaps};
use super::{numel_of, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Square,
    Rsqrt,
}

impl UnaryKind {
    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Relu => "relu",
            UnaryKind::Gelu => "gelu",
            UnaryKind::Silu => "silu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
            UnaryKind::Rsqrt => "rsqrt",
        }
    }

    fn forward<T: Float>(self, x: T) -> T {
        let one = T::one();
        match self {
            UnaryKind::Relu => x.max(T::zero()),
            UnaryKind::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let u = c * (x + a * x * x * x);
                T::of(0.5) * x * (one + u.tanh())
            }
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Rsqrt => one / x.sqrt(),
        }
    }

    /// d out / d x, given input `x` and output `y`.
    fn derivative<T: Float>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            UnaryKind::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            UnaryKind::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let u = c * (x + a * x * x * x);
                let t = u.tanh();
                let du = c * (one + T::of(3.0) * a * x * x);
                T::of(0.5) * (one + t) + T::of(0.5) * x * (one - t * t) * du
            }
            UnaryKind::Silu => {
                let s = sigmoid(x);
                s * (one + x * (one - s))
            }
            UnaryKind::Sigmoid => y * (one - y),
            UnaryKind::Tanh => one - y * y,
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Log => one / x,
            UnaryKind::Square => T::of(2.0) * x,
            UnaryKind::Rsqrt => T::of(-0.5) * y / x,
        }
    }
}

fn gelu_consts<T: Float>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a batch offset, b batch offset) per output batch entry.
    pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct ResizePlan {
    channels: usize,
    h_in: usize,
    w_in: usize,
    ys: LinearTaps,
    xs: LinearTaps,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `b`'s shape is a suffix of `a`'s; `b` repeats over the leading axes.
    AddBroadcast(Var, Var),
    /// `a * b` with the same suffix rule as `AddBroadcast`.
    MulBroadcast(Var, Var),
    /// `x[C, ...] + b[C]`
    ChannelBias(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Unary(Var, UnaryKind),
    MatMul(Var, Var, MatmulPlan),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, batch: usize },
    Resize(Var, ResizePlan),
    Concat { inputs: Vec<Var>, axis: usize },
    Gather { x: Var, rows: Vec<usize> },
    SumAll(Var),
    SumAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, targets: Vec<u32>, ignore: u32, probs: Vec<T>, count: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::MulBroadcast(..) => "mul_broadcast",
            Op::ChannelBias(..) => "channel_bias",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Unary(_, k) => k.name(),
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Resize(..) => "resize_bilinear",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather_rows",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

thread_local! {
    static BACKWARD_FAULT: Cell<Option<&'static str>> = const { Cell::new(None) };
}

/// Test fixture: corrupts the backward rule of the named op (its input
/// gradients are scaled by 1.5) on the current thread. `None` restores it.
pub fn set_backward_fault(op: Option<&'static str>) {
    BACKWARD_FAULT.with(|f| f.set(op));
}

fn fault_factor<T: Float>(op: &'static str) -> Option<T> {
    BACKWARD_FAULT.with(|f| f.get()).filter(|&name| name == op).map(|_| T::of(1.5))
}

/// A computation tape over parameters borrowed from one [`ParamStore`].
pub struct Graph<'s, T: Float> {
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<'_, T> {
    fn default() -> Self {
        Graph { store: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }
}

impl<'s, T: Float> Graph<'s, T> {
    /// A graph with no parameter store; only constants can be leaves.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_store(store: &'s ParamStore<T>) -> Self {
        Graph { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that collects gradient but is not tied to a stored parameter.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The leaf for a stored parameter. Repeated calls with the same id return
    /// the same node, so every use accumulates into one gradient. Frozen
    /// parameters enter as constants.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("Graph::param requires a graph built with_store");
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, !p.frozen);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    // ---- element-wise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor { shape: ta.shape().to_vec(), data }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let inner = numel_of(sb);
        let tb = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &bv) in chunk.iter_mut().zip(tb) {
                *o += bv;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::AddBroadcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape equals the trailing axes of `a` (a scalar
    /// `b` scales everything).
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("mul_broadcast", format!("{sb:?} is not a suffix of {sa:?}")));
        }
        let inner = numel_of(sb);
        let tb = self.value(b).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &bv) in chunk.iter_mut().zip(tb) {
                *o *= bv;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MulBroadcast(a, b), rg))
    }

    /// Adds `b[C]` to every element of channel `c` in `x[C, ...]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.is_empty() || sb != [sx[0]] {
            return Err(Error::shape("channel_bias", format!("bias {sb:?} vs input {sx:?}")));
        }
        let inner = numel_of(&sx[1..]);
        let tb = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (c, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            for o in chunk {
                *o += tb[c];
            }
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::ChannelBias(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(x).map(|v| v + s);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn unary(&mut self, x: Var, kind: UnaryKind) -> Var {
        let out = self.value(x).map(|v| kind.forward(v));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Relu)
    }
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Gelu)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Silu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Softplus)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Square)
    }
    pub fn rsqrt(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Rsqrt)
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., M, K] · [.., K, N] -> [.., M, N]` with
    /// numpy-style broadcasting of the leading (batch) axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("need rank >= 2, got {sa:?} and {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {sa:?} · {sb:?}")));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::shape("matmul", format!("batch extents not broadcastable: {sa:?} · {sb:?}")));
            }
            batch.push(x.max(y));
        }
        let nb = numel_of(&batch);
        let mut pairs = Vec::with_capacity(nb);
        let mut idx = vec![0usize; rank];
        for _ in 0..nb {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..rank {
                oa = oa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                ob = ob * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
            }
            pairs.push((oa, ob));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out_shape = batch;
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); nb * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (bi, &(oa, ob)) in pairs.iter().enumerate() {
            kernels::gemm_nn(
                &da[oa * m * k..(oa + 1) * m * k],
                &db[ob * k * n..(ob + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        let t = Tensor { shape: out_shape, data: out };
        Ok(self.push(t, Op::MatMul(a, b, MatmulPlan { m, k, n, pairs }), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("need rank >= 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (bo, bi) in out.chunks_mut(r * c).zip(src.chunks(r * c)) {
            transpose_into(bi, bo, r, c);
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Transpose(x), rg))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {s:?}")));
        }
        let out = permute_data(self.value(x), perm);
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    // ---- normalization & attention -----------------------------------

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(src[at(l)]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (src[at(l)] - mx).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: s, data: out }, Op::Softmax { x, axis }, rg))
    }

    /// Layer norm over the last axis with per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs last extent {d}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::of(eps);
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = src.len() / d;
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv_d = T::one() / T::of(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(Tensor { shape: s, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√D)·v`, batched over leading
    /// axes. Returns `(output, weights)`; weight rows are stochastic over keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let width = *sq.last().ok_or_else(|| Error::shape("attention", "scalar query"))?;
        if sk.last() != Some(&width) {
            return Err(Error::shape("attention", format!("query {sq:?} vs key {sk:?} width")));
        }
        if sk.len() < 2 || sv.len() < 2 || sk[sk.len() - 2] != sv[sv.len() - 2] {
            return Err(Error::shape("attention", format!("key {sk:?} vs value {sv:?} length")));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / (width as f64).sqrt());
        let last = self.shape(scores).len() - 1;
        let weights = self.softmax(scores, last)?;
        let out = self.matmul(weights, v)?;
        Ok((out, weights))
    }

    // ---- spatial ------------------------------------------------------

    /// 2-D convolution. `x` is `[C, H, W]` or `[B, C, H, W]`; `w` is
    /// `[Cout, Cin, k, k]`; `b` optional `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (batch, c_in, h, wd) = match *sx.as_slice() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be rank 3 or 4, got {sx:?}"))),
        };
        let (c_out, k) = match sw.as_slice() {
            &[co, ci, kh, kw] if ci == c_in && kh == kw => (co, kh),
            _ => return Err(Error::shape("conv2d", format!("kernel {sw:?} incompatible with input {sx:?}"))),
        };
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be >= 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d", format!("bias {:?} vs {c_out} output channels", self.shape(b))));
            }
        }
        if k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (wd + 2 * pad - k) / stride + 1,
        };
        let (pl, p) = (geom.patch_len(), geom.out_pixels());
        let mut out = vec![T::zero(); batch * c_out * p];
        let mut cols = vec![T::zero(); pl * p];
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        for n in 0..batch {
            kernels::im2col(&xd[n * c_in * h * wd..(n + 1) * c_in * h * wd], &geom, &mut cols);
            let o = &mut out[n * c_out * p..(n + 1) * c_out * p];
            kernels::gemm_nn(wdata, &cols, o, c_out, pl, p);
            if let Some(b) = b {
                let bd = self.value(b).data();
                for (co, row) in o.chunks_mut(p).enumerate() {
                    for v in row {
                        *v += bd[co];
                    }
                }
            }
        }
        let shape = if sx.len() == 3 {
            vec![c_out, geom.h_out, geom.w_out]
        } else {
            vec![batch, c_out, geom.h_out, geom.w_out]
        };
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor { shape, data: out }, Op::Conv2d { x, w, b, geom, batch }, rg))
    }

    /// Half-pixel bilinear resize of the last two axes of `x[.., H, W]`.
    pub fn resize_bilinear(&mut self, x: Var, h_out: usize, w_out: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || h_out == 0 || w_out == 0 {
            return Err(Error::shape("resize_bilinear", format!("input {s:?} to {h_out}x{w_out}")));
        }
        let (h_in, w_in) = (s[s.len() - 2], s[s.len() - 1]);
        let channels = numel_of(&s[..s.len() - 2]);
        let plan = ResizePlan {
            channels,
            h_in,
            w_in,
            ys: LinearTaps::new(h_in, h_out),
            xs: LinearTaps::new(w_in, w_out),
        };
        let out = resize_forward(self.value(x).data(), &plan);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend_from_slice(&[h_out, w_out]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Resize(x, plan), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &e)| d != axis && e != first[d]) {
                return Err(Error::shape("concat", format!("{s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer = numel_of(&first[..axis]);
        let inner = numel_of(&first[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::shape("gather_rows", format!("rows {rows:?} for shape {s:?}")));
        }
        let inner = numel_of(&s[1..]);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&d[r * inner..(r + 1) * inner]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Gather { x, rows: rows.to_vec() }, rg))
    }

    // ---- reductions & losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums out one axis (the axis is removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::SumAxis { x, axis }, rg))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits, axis 0)`.
    /// `logits` is `[C, ...]`, `targets` has one label per trailing position;
    /// labels equal to `ignore` are skipped entirely. With nothing to score the
    /// loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], ignore: u32) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.is_empty() {
            return Err(Error::shape("cross_entropy", "scalar logits"));
        }
        let c = s[0];
        let n = numel_of(&s[1..]);
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} targets for logits {s:?}", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t as usize >= c) {
            return Err(Error::shape("cross_entropy", format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); c * n];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let mut mx = T::neg_infinity();
            for k in 0..c {
                mx = mx.max(src[k * n + i]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (src[k * n + i] - mx).exp();
                probs[k * n + i] = e;
                sum += e;
            }
            for k in 0..c {
                probs[k * n + i] /= sum;
            }
            total += mx + sum.ln() - src[t as usize * n + i];
            count += 1;
        }
        let loss = if count == 0 {
            log::warn!("cross_entropy: every pixel carries the ignore label; loss defined as 0");
            T::zero()
        } else {
            total / T::of(count as f64)
        };
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore, probs, count },
            rg,
        ))
    }

    // ---- analysis -----------------------------------------------------

    /// Parameters whose leaves are reachable from `root` through the tape.
    pub fn reachable_params(&self, root: Var) -> BTreeSet<ParamId> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![root];
        let mut out = BTreeSet::new();
        while let Some(v) = stack.pop() {
            if std::mem::replace(&mut seen[v.0], true) {
                continue;
            }
            let node = &self.nodes[v.0];
            if let Some(p) = node.param {
                out.insert(p);
            }
            stack.extend(inputs_of(&node.op));
        }
        out
    }

    // ---- backward -----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of every node that
    /// requires grad are returned; uses of one node accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: self.shape(loss).to_vec(), data: vec![T::one()] });
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, Var(i))))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, op: &'static str, mut g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        if let Some(f) = fault_factor::<T>(op) {
            g.scale_in_place(f);
        }
        debug_assert_eq!(g.shape(), self.shape(v), "{op}: gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let name = node.op.name();
        let go = gout.data();
        let like = |v: Var, data: Vec<T>| Tensor { shape: self.shape(v).to_vec(), data };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, name, gout.clone());
                self.accumulate(grads, *b, name, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, name, gout.clone());
                self.accumulate(grads, *b, name, gout.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let d = go.iter().zip(vb).map(|(&g, &y)| g * y).collect();
                    self.accumulate(grads, *a, name, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let d = go.iter().zip(va).map(|(&g, &x)| g * x).collect();
                    self.accumulate(grads, *b, name, like(*b, d));
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, name, gout.clone());
                if self.requires_grad(*b) {
                    let inner = self.value(*b).numel();
                    let mut d = vec![T::zero(); inner];
                    for chunk in go.chunks(inner) {
                        for (acc, &g) in d.iter_mut().zip(chunk) {
                            *acc += g;
                        }
                    }
                    self.accumulate(grads, *b, name, like(*b, d));
                }
            }
            Op::MulBroadcast(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let inner = vb.len();
                if self.requires_grad(*a) {
                    let d = go.iter().enumerate().map(|(i, &g)| g * vb[i % inner]).collect();
                    self.accumulate(grads, *a, name, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let mut d = vec![T::zero(); inner];
                    for (i, (&g, &x)) in go.iter().zip(va).enumerate() {
                        d[i % inner] += g * x;
                    }
                    self.accumulate(grads, *b, name, like(*b, d));
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, *x, name, gout.clone());
                if self.requires_grad(*b) {
                    let c = self.value(*b).numel();
                    let inner = go.len() / c;
                    let d = go.chunks(inner).map(|ch| ch.iter().copied().sum::<T>()).collect();
                    self.accumulate(grads, *b, name, like(*b, d));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, name, gout.map(|g| g * s));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, name, gout.clone()),
            Op::Unary(x, kind) => {
                let (vx, vy) = (self.value(*x).data(), node.value.data());
                let d = go
                    .iter()
                    .zip(vx.iter().zip(vy))
                    .map(|(&g, (&xv, &yv))| g * kind.derivative(xv, yv))
                    .collect();
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::MatMul(a, b, plan) => {
                let MatmulPlan { m, k, n, ref pairs } = *plan;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut d = vec![T::zero(); va.len()];
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        kernels::gemm_nt(
                            &go[bi * m * n..(bi + 1) * m * n],
                            &vb[ob * k * n..(ob + 1) * k * n],
                            &mut d[oa * m * k..(oa + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, name, like(*a, d));
                }
                if self.requires_grad(*b) {
                    let mut d = vec![T::zero(); vb.len()];
                    for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                        kernels::gemm_tn(
                            &va[oa * m * k..(oa + 1) * m * k],
                            &go[bi * m * n..(bi + 1) * m * n],
                            &mut d[ob * k * n..(ob + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, name, like(*b, d));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let mut d = vec![T::zero(); go.len()];
                for (bo, bi) in d.chunks_mut(r * c).zip(go.chunks(r * c)) {
                    transpose_into(bi, bo, r, c);
                }
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, name, permute_data(gout, &inv));
            }
            Op::Reshape(x) => self.accumulate(grads, *x, name, like(*x, go.to_vec())),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dotp = (0..len).map(|l| go[at(l)] * y[at(l)]).sum::<T>();
                        for l in 0..len {
                            d[at(l)] = y[at(l)] * (go[at(l)] - dotp);
                        }
                    }
                }
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *self.shape(*x).last().unwrap();
                let g = self.value(*gain).data();
                let rows = go.len() / d;
                if self.requires_grad(*x) {
                    let mut dx = vec![T::zero(); go.len()];
                    let inv_d = T::one() / T::of(d as f64);
                    for r in 0..rows {
                        let (gr, xr) = (&go[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * g[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (gr[j] * g[j] - m1 - xr[j] * m2);
                        }
                    }
                    self.accumulate(grads, *x, name, like(*x, dx));
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += go[r * d + j] * xhat[r * d + j];
                            db[j] += go[r * d + j];
                        }
                    }
                    self.accumulate(grads, *gain, name, like(*gain, dg));
                    self.accumulate(grads, *bias, name, like(*bias, db));
                }
            }
            Op::Conv2d { x, w, b, geom, batch } => {
                let (pl, p) = (geom.patch_len(), geom.out_pixels());
                let c_out = self.shape(*w)[0];
                let in_len = geom.c_in * geom.h * geom.w;
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let mut cols = vec![T::zero(); pl * p];
                let mut dx = if self.requires_grad(*x) { Some(vec![T::zero(); xd.len()]) } else { None };
                let mut dw = if self.requires_grad(*w) { Some(vec![T::zero(); wd.len()]) } else { None };
                for nb in 0..*batch {
                    let gslice = &go[nb * c_out * p..(nb + 1) * c_out * p];
                    if let Some(dw) = dw.as_mut() {
                        kernels::im2col(&xd[nb * in_len..(nb + 1) * in_len], geom, &mut cols);
                        kernels::gemm_nt(gslice, &cols, dw, c_out, p, pl);
                    }
                    if let Some(dx) = dx.as_mut() {
                        cols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(wd, gslice, &mut cols, pl, c_out, p);
                        kernels::col2im(&cols, geom, &mut dx[nb * in_len..(nb + 1) * in_len]);
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, name, like(*x, dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, name, like(*w, dw));
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let mut db = vec![T::zero(); c_out];
                        for nb in 0..*batch {
                            for (co, acc) in db.iter_mut().enumerate() {
                                let start = (nb * c_out + co) * p;
                                *acc += go[start..start + p].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, name, like(*b, db));
                    }
                }
            }
            Op::Resize(x, plan) => {
                let d = resize_backward(go, plan);
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer = numel_of(&s[..*axis]);
                let inner = numel_of(&s[*axis + 1..]);
                let total = s[*axis];
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&go[start..start + len * inner]);
                        }
                        self.accumulate(grads, v, name, like(v, d));
                    }
                    offset += len;
                }
            }
            Op::Gather { x, rows } => {
                let inner = numel_of(&self.shape(*x)[1..]);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (j, &r) in rows.iter().enumerate() {
                    for (acc, &g) in d[r * inner..(r + 1) * inner].iter_mut().zip(&go[j * inner..(j + 1) * inner]) {
                        *acc += g;
                    }
                }
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::SumAll(x) => {
                let g = go[0];
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, name, like(*x, vec![g; n]));
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&go[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *x, name, like(*x, d));
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                let mut d = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let scale = go[0] / T::of(*count as f64);
                    let n = targets.len();
                    let c = probs.len() / n;
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        for k in 0..c {
                            let onehot = if k == t as usize { T::one() } else { T::zero() };
                            d[k * n + i] = (probs[k * n + i] - onehot) * scale;
                        }
                    }
                }
                self.accumulate(grads, *logits, name, like(*logits, d));
            }
        }
    }
}

fn inputs_of<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBroadcast(a, b)
        | Op::MulBroadcast(a, b)
        | Op::ChannelBias(a, b) => {
            vec![*a, *b]
        }
        Op::MatMul(a, b, _) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Unary(x, _)
        | Op::Transpose(x)
        | Op::Permute(x, _)
        | Op::Reshape(x)
        | Op::Resize(x, _)
        | Op::SumAll(x) => vec![*x],
        Op::Softmax { x, .. } | Op::Gather { x, .. } | Op::SumAxis { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(*b);
            v
        }
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::CrossEntropy { logits, .. } => vec![*logits],
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients (only parameters that received gradient).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(|&(p, v)| self.grads[v.0].as_ref().map(|g| (p, g)))
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (p, g) in self.params() {
            store.get_mut(p).grad.add_assign(g);
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel_of(&shape[..axis]), shape[axis], numel_of(&shape[axis + 1..]))
}

fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], r: usize, c: usize) {
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
}

fn permute_data<T: Float>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let rank = s.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * s[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor { shape: out_shape, data: out }
}

fn resize_forward<T: Float>(src: &[T], plan: &ResizePlan) -> Vec<T> {
    let (ho, wo) = (plan.ys.i0.len(), plan.xs.i0.len());
    let mut out = vec![T::zero(); plan.channels * ho * wo];
    for c in 0..plan.channels {
        let s = &src[c * plan.h_in * plan.w_in..(c + 1) * plan.h_in * plan.w_in];
        for y in 0..ho {
            let (y0, y1) = (plan.ys.i0[y], plan.ys.i1[y]);
            let (wy0, wy1) = (T::of(plan.ys.w0[y]), T::of(plan.ys.w1[y]));
            for x in 0..wo {
                let (x0, x1) = (plan.xs.i0[x], plan.xs.i1[x]);
                let (wx0, wx1) = (T::of(plan.xs.w0[x]), T::of(plan.xs.w1[x]));
                let top = s[y0 * plan.w_in + x0] * wx0 + s[y0 * plan.w_in + x1] * wx1;
                let bot = s[y1 * plan.w_in + x0] * wx0 + s[y1 * plan.w_in + x1] * wx1;
                out[(c * ho + y) * wo + x] = top * wy0 + bot * wy1;
            }
        }
    }
    out
}

fn resize_backward<T: Float>(go: &[T], plan: &ResizePlan) -> Vec<T> {
    let (ho, wo) = (plan.ys.i0.len(), plan.xs.i0.len());
    let mut d = vec![T::zero(); plan.channels * plan.h_in * plan.w_in];
    for c in 0..plan.channels {
        let dst = &mut d[c * plan.h_in * plan.w_in..(c + 1) * plan.h_in * plan.w_in];
        for y in 0..ho {
            let (y0, y1) = (plan.ys.i0[y], plan.ys.i1[y]);
            let (wy0, wy1) = (T::of(plan.ys.w0[y]), T::of(plan.ys.w1[y]));
            for x in 0..wo {
                let g = go[(c * ho + y) * wo + x];
                let (x0, x1) = (plan.xs.i0[x], plan.xs.i1[x]);
                let (wx0, wx1) = (T::of(plan.xs.w0[x]), T::of(plan.xs.w1[x]));
                dst[y0 * plan.w_in + x0] += g * wy0 * wx0;
                dst[y0 * plan.w_in + x1] += g * wy0 * wx1;
                dst[y1 * plan.w_in + x0] += g * wy1 * wx0;
                dst[y1 * plan.w_in + x1] += g * wy1 * wx1;
            }
        }
    }
    d
}
