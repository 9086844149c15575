//! Cross-attention conditioned UNet used as a feature extractor at `t = 0`.
//!
//! Four resolution levels sit at strides 8, 16, 32 and 64 of the input image
//! (the latent is already at stride 8). Each decoder level yields one feature
//! tap, and every cross-attention block contributes its head-averaged
//! attention map to the averaged map `F_CA`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{channel_norm, from_tokens, to_tokens, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{Float, Graph, ParamStore, Var};

pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    /// Channels per level, finest first.
    pub channels: [usize; LEVELS],
    /// Levels whose encoder block carries cross-attention.
    pub encoder_attention: [bool; LEVELS],
    /// Levels whose decoder block carries cross-attention.
    pub decoder_attention: [bool; LEVELS],
    pub d_cond: usize,
    pub nq: usize,
    pub time_dim: usize,
    pub heads: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: crate::encoders::LATENT_CHANNELS,
            channels: [32, 64, 96, 128],
            encoder_attention: [true, true, false, false],
            decoder_attention: [true, true, false, false],
            d_cond: 32,
            nq: 256,
            time_dim: 64,
            heads: 4,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let (e, d) = count_cross_attention_blocks(self);
        if e == 0 || d == 0 {
            return Err(Error::Config(format!(
                "cross-attention needs at least one encoder and one decoder block, got ({e}, {d})"
            )));
        }
        for (l, (&c, (&ea, &da))) in
            self.channels.iter().zip(self.encoder_attention.iter().zip(&self.decoder_attention)).enumerate()
        {
            if (ea || da) && c % self.heads != 0 {
                return Err(Error::Config(format!("level {l}: {c} channels not divisible by {} heads", self.heads)));
            }
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config("time embedding width must be even".into()));
        }
        Ok(())
    }
}

/// Cross-attention blocks in the encoder and decoder halves.
pub fn count_cross_attention_blocks(cfg: &UNetConfig) -> (usize, usize) {
    let count = |v: &[bool; LEVELS]| v.iter().filter(|&&b| b).count();
    (count(&cfg.encoder_attention), count(&cfg.decoder_attention))
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: i64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.cos();
        out[half + i] = a.sin();
    }
    out
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: LayerNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(ResBlock {
            norm1: LayerNorm::new(store, &n("norm1"), c_in)?,
            conv1: Conv2d::new(store, &n("conv1"), c_in, c_out, 3, 1, 1, rng)?,
            time: Linear::new(store, &n("time"), time_dim, c_out, true, rng)?,
            norm2: LayerNorm::new(store, &n("norm2"), c_out)?,
            conv2: Conv2d::new(store, &n("conv2"), c_out, c_out, 3, 1, 1, rng)?,
            skip: if c_in != c_out { Some(Conv2d::new(store, &n("skip"), c_in, c_out, 1, 1, 0, rng)?) } else { None },
        })
    }

    /// `x[C, H, W]`, `temb[1, time_dim]` (already passed through SiLU).
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var) -> Result<Var> {
        let h = channel_norm(g, &self.norm1, x)?;
        let h = g.silu(h);
        let h = self.conv1.forward(g, h)?;
        let t = self.time.forward(g, temb)?;
        let c = g.shape(t)[1];
        let t = g.reshape(t, &[c])?;
        let h = g.channel_bias(h, t)?;
        let h = channel_norm(g, &self.norm2, h)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(conv) => conv.forward(g, x)?,
            None => x,
        };
        g.add(s, h)
    }
}

/// Pixel tokens attend to the conditioning tokens, then a small feed-forward.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        d_cond: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(CrossAttentionBlock {
            norm: LayerNorm::new(store, &n("norm"), channels)?,
            attn: MultiHeadAttention::new(store, &n("attn"), channels, d_cond, channels, heads, rng)?,
            norm_ff: LayerNorm::new(store, &n("norm_ff"), channels)?,
            ff: FeedForward::new(store, &n("ff"), channels, 2 * channels, rng)?,
        })
    }

    /// Returns the updated map and the head-averaged weights `[H·W, Nq]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, cond: Var) -> Result<(Var, Var)> {
        let s = g.shape(x).to_vec();
        let tokens = to_tokens(g, x)?;
        let h = self.norm.forward(g, tokens)?;
        let a = self.attn.forward(g, h, cond, cond)?;
        let tokens = g.add(tokens, a.out)?;
        let h = self.norm_ff.forward(g, tokens)?;
        let f = self.ff.forward(g, h)?;
        let tokens = g.add(tokens, f)?;
        Ok((from_tokens(g, tokens, s[1], s[2])?, a.weights))
    }
}

struct Captured {
    weights: Var,
    h: usize,
    w: usize,
}

#[derive(Clone, Debug)]
struct Level {
    res: ResBlock,
    attn: Option<CrossAttentionBlock>,
}

impl Level {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, temb: Var, cond: Var, maps: &mut Vec<Captured>) -> Result<Var> {
        let x = self.res.forward(g, x, temb)?;
        match &self.attn {
            Some(a) => {
                let (h, w) = (g.shape(x)[1], g.shape(x)[2]);
                let (y, weights) = a.forward(g, x, cond)?;
                maps.push(Captured { weights, h, w });
                Ok(y)
            }
            None => Ok(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    conv_in: Conv2d,
    encoder: Vec<Level>,
    downsample: Vec<Conv2d>,
    mid: ResBlock,
    decoder: Vec<Level>,
}

/// Hierarchical features of one image.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// Decoder taps at strides 8, 16, 32, 64.
    pub taps: [Var; LEVELS],
    /// Averaged cross-attention map `[Nq, H/8, W/8]`.
    pub f_ca: Var,
    /// Head-averaged weights `[h·w, Nq]` of every cross-attention block,
    /// encoder blocks first.
    pub attention_maps: Vec<Var>,
}

impl UNet {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let p = |s: String| format!("{prefix}.{s}");
        let ch = cfg.channels;
        let td = cfg.time_dim;
        let time_fc1 = Linear::new(store, &p("time.fc1".into()), td, td, true, rng)?;
        let time_fc2 = Linear::new(store, &p("time.fc2".into()), td, td, true, rng)?;
        let conv_in = Conv2d::new(store, &p("conv_in".into()), cfg.in_channels, ch[0], 3, 1, 1, rng)?;
        let mut encoder = Vec::with_capacity(LEVELS);
        let mut downsample = Vec::with_capacity(LEVELS - 1);
        for l in 0..LEVELS {
            let c_in = if l == 0 { ch[0] } else { ch[l - 1] };
            let res = ResBlock::new(store, &p(format!("enc{l}.res")), c_in, ch[l], td, rng)?;
            let attn = if cfg.encoder_attention[l] {
                Some(CrossAttentionBlock::new(store, &p(format!("enc{l}.ca")), ch[l], cfg.d_cond, cfg.heads, rng)?)
            } else {
                None
            };
            encoder.push(Level { res, attn });
            if l + 1 < LEVELS {
                downsample.push(Conv2d::new(store, &p(format!("down{l}")), ch[l], ch[l], 3, 2, 1, rng)?);
            }
        }
        let mid = ResBlock::new(store, &p("mid".into()), ch[LEVELS - 1], ch[LEVELS - 1], td, rng)?;
        let mut decoder = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            let c_below = if l + 1 < LEVELS { ch[l + 1] } else { ch[l] };
            let res = ResBlock::new(store, &p(format!("dec{l}.res")), c_below + ch[l], ch[l], td, rng)?;
            let attn = if cfg.decoder_attention[l] {
                Some(CrossAttentionBlock::new(store, &p(format!("dec{l}.ca")), ch[l], cfg.d_cond, cfg.heads, rng)?)
            } else {
                None
            };
            decoder.push(Level { res, attn });
        }
        Ok(UNet { cfg, time_fc1, time_fc2, conv_in, encoder, downsample, mid, decoder })
    }

    /// Time embedding after its MLP and the SiLU every block applies.
    fn time_embedding<T: Float>(&self, g: &mut Graph<'_, T>, t: i64) -> Result<Var> {
        let sin = timestep_embedding(t, self.cfg.time_dim);
        let e = g.constant(crate::tensor::Tensor::from_f64(&[1, self.cfg.time_dim], &sin)?);
        let e = self.time_fc1.forward(g, e)?;
        let e = g.silu(e);
        let e = self.time_fc2.forward(g, e)?;
        Ok(g.silu(e))
    }

    /// `z0[C_lat, h, w]` with `cond[Nq, D_cond]` at timestep `t` (only 0 is
    /// supported).
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, z0: Var, cond: Var, t: i64) -> Result<FeatureBundle> {
        if t != 0 {
            return Err(Error::UnsupportedTimestep(t));
        }
        if g.shape(cond) != [self.cfg.nq, self.cfg.d_cond] {
            return Err(Error::shape(
                "unet_forward",
                format!("conditioning {:?} vs expected [{}, {}]", g.shape(cond), self.cfg.nq, self.cfg.d_cond),
            ));
        }
        let zs = g.shape(z0).to_vec();
        let scale = 1 << (LEVELS - 1);
        if zs.len() != 3 || zs[0] != self.cfg.in_channels || !zs[1].is_multiple_of(scale) || !zs[2].is_multiple_of(scale) {
            return Err(Error::shape("unet_forward", format!("latent {zs:?} must be [{}, 8k, 8m]", self.cfg.in_channels)));
        }
        let temb = self.time_embedding(g, t)?;
        let mut maps = Vec::new();
        let mut x = self.conv_in.forward(g, z0)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            x = self.encoder[l].forward(g, x, temb, cond, &mut maps)?;
            skips.push(x);
            if l + 1 < LEVELS {
                x = self.downsample[l].forward(g, x)?;
            }
        }
        x = self.mid.forward(g, x, temb)?;
        let mut taps = [x; LEVELS];
        for l in (0..LEVELS).rev() {
            let skip = skips[l];
            let (h, w) = (g.shape(skip)[1], g.shape(skip)[2]);
            if g.shape(x)[1] != h {
                x = g.resize_bilinear(x, h, w)?;
            }
            let cat = g.concat(&[x, skip], 0)?;
            x = self.decoder[l].forward(g, cat, temb, cond, &mut maps)?;
            taps[l] = x;
        }
        let f_ca = average_maps(g, &maps, zs[1], zs[2])?;
        Ok(FeatureBundle { taps, f_ca, attention_maps: maps.iter().map(|m| m.weights).collect() })
    }
}

/// Resizes every `[h·w, Nq]` map to `[Nq, h0, w0]` and averages them.
fn average_maps<T: Float>(g: &mut Graph<'_, T>, maps: &[Captured], h0: usize, w0: usize) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for m in maps {
        let nq = g.shape(m.weights)[1];
        let t = g.transpose(m.weights)?;
        let mut t = g.reshape(t, &[nq, m.h, m.w])?;
        if (m.h, m.w) != (h0, w0) {
            t = g.resize_bilinear(t, h0, w0)?;
        }
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    let sum = acc.ok_or_else(|| Error::Contract("no cross-attention maps captured".into()))?;
    Ok(g.scale(sum, 1.0 / maps.len() as f64))
}
