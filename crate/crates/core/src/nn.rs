//! Parameterized layers. Each layer only stores [`ParamId`]s; values live in
//! the caller's [`ParamStore`], so the same layer runs at either precision.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Fan-in scaled normal initialization.
pub(crate) fn init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `y = x · W + b` over the last axis; `W` is `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.randn(format!("{name}.w"), &[d_in, d_out], init_std(d_in), rng)?;
        let b = if bias { Some(store.zeros(format!("{name}.b"), &[d_out])?) } else { None };
        Ok(Linear { w, b, d_in, d_out })
    }

    /// Same shape as [`Linear::new`] but with all-zero weights.
    pub fn zeroed<T: Float>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let w = store.zeros(format!("{name}.w"), &[d_in, d_out])?;
        let b = Some(store.zeros(format!("{name}.b"), &[d_out])?);
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], T::one()))?;
        let bias = store.zeros(format!("{name}.bias"), &[d])?;
        Ok(LayerNorm { gain, bias })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

/// Output of [`MultiHeadAttention::forward`].
pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights averaged over heads, `[Lq, Lk]`; rows sum to one.
    pub weights: Var,
}

impl MultiHeadAttention {
    /// `width` is the internal model width (split across `heads`);
    /// queries come in with `d_query` features and keys/values with `d_context`.
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_query: usize,
        d_context: usize,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        assert!(heads > 0 && width.is_multiple_of(heads), "width {width} not divisible by {heads} heads");
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d_query, width, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d_context, width, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d_context, width, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), width, d_query, true, rng)?,
            heads,
            width,
        })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<'_, T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, key)?;
        let v = self.v.forward(g, value)?;
        let (out, weights) = if self.heads == 1 {
            g.attention(q, k, v)?
        } else {
            let q = self.split_heads(g, q)?;
            let k = self.split_heads(g, k)?;
            let v = self.split_heads(g, v)?;
            let (o, w) = g.attention(q, k, v)?;
            let lq = g.shape(o)[1];
            let o = g.permute(o, &[1, 0, 2])?;
            let o = g.reshape(o, &[lq, self.width])?;
            let w = g.sum_axis(w, 0)?;
            let w = g.scale(w, 1.0 / self.heads as f64);
            (o, w)
        };
        let out = self.o.forward(g, out)?;
        Ok(AttentionOutput { out, weights })
    }

    /// `[L, width]` to `[heads, L, width / heads]`.
    fn split_heads<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let l = g.shape(x)[0];
        let x = g.reshape(x, &[l, self.heads, self.width / self.heads])?;
        g.permute(x, &[1, 0, 2])
    }

    /// The projections that write into the residual stream.
    pub fn output_params(&self) -> Vec<ParamId> {
        self.o.params()
    }
}

/// 2-D convolution with bias; kernel `[out, in, k, k]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub c_out: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.randn(format!("{name}.w"), &[c_out, c_in, k, k], init_std(c_in * k * k), rng)?;
        let b = store.zeros(format!("{name}.b"), &[c_out])?;
        Ok(Conv2d { w, b, stride, pad, c_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// `[C, H, W]` to pixel tokens `[H·W, C]`.
pub fn to_tokens<T: Float>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2]])?;
    g.transpose(flat)
}

/// Pixel tokens `[H·W, C]` back to `[C, H, W]`.
pub fn from_tokens<T: Float>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.transpose(x)?;
    g.reshape(t, &[c, h, w])
}

/// Layer norm across channels at every pixel of `[C, H, W]`.
pub fn channel_norm<T: Float>(g: &mut Graph<'_, T>, ln: &LayerNorm, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let t = to_tokens(g, x)?;
    let t = ln.forward(g, t)?;
    from_tokens(g, t, s[1], s[2])
}

/// Rows of `x[N, D]` scaled to unit Euclidean norm.
pub fn l2_normalize_rows<T: Float>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let sq = g.square(x);
    let sums = g.sum_axis(sq, 1)?;
    let sums = g.add_scalar(sums, 1e-12);
    let inv = g.rsqrt(sums);
    let xt = g.transpose(x)?;
    let scaled = g.mul_broadcast(xt, inv)?;
    g.transpose(scaled)
}

/// Standard pre-norm transformer block: `x + MHA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, hidden, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}
