//! Conditioning streams: implicit prompts produced from the image by a
//! learnable-query adapter, and explicit prompts built from class words.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::synth::Palette;
use crate::tensor::{Float, Graph, ParamId, ParamStore, Var};

/// Prompt word used when a sample has no ground-truth classes.
pub const BACKGROUND_WORD: &str = "background";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    LearnableQueries,
    MlpOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptConfig {
    /// Conditioning tokens per stream.
    pub nq: usize,
    /// Width of the frozen tower features.
    pub d_text: usize,
    /// Conditioning width fed to the UNet.
    pub d_cond: usize,
    /// Image patch tokens.
    pub patches: usize,
    pub heads: usize,
    pub position_embeddings: bool,
    pub adapter: AdapterKind,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            nq: 256,
            d_text: 64,
            d_cond: 32,
            patches: 64,
            heads: 4,
            position_embeddings: true,
            adapter: AdapterKind::LearnableQueries,
        }
    }
}

/// Per-token projector `h + W₂·gelu(h) + b₂` with `h = W₁x + b₁`.
#[derive(Clone, Debug)]
pub struct Projector {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Projector {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Projector {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, d_out, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d_out, d_out, true, rng)?,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let a = g.gelu(h);
        let r = self.fc2.forward(g, a)?;
        g.add(h, r)
    }
}

/// Intermediate values of one implicit-prompt pass.
#[derive(Clone, Copy, Debug)]
pub struct ImplicitTrace {
    /// Projected visual tokens `[Np, D_cond]`.
    pub visual: Var,
    /// Queries after self-attention (absent for the MLP adapter).
    pub q_s: Option<Var>,
    /// Queries after cross-attention (absent for the MLP adapter).
    pub q_c: Option<Var>,
    /// Output embeddings `[Nq, D_cond]`.
    pub out: Var,
}

#[derive(Clone, Debug)]
pub struct ImplicitPromptModule {
    pub cfg: PromptConfig,
    pub projector: Projector,
    pub queries: ParamId,
    pub query_pos: ParamId,
    pub key_pos: ParamId,
    pub norm_q: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_s: LayerNorm,
    pub norm_vis: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_c: LayerNorm,
    pub ffn: FeedForward,
}

impl ImplicitPromptModule {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: PromptConfig, rng: &mut R) -> Result<Self> {
        let (nq, dc) = (cfg.nq, cfg.d_cond);
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(ImplicitPromptModule {
            cfg,
            projector: Projector::new(store, &p("projector"), cfg.d_text, dc, rng)?,
            queries: store.randn(p("queries"), &[nq, dc], 1.0, rng)?,
            query_pos: store.randn(p("query_pos"), &[nq, dc], 0.02, rng)?,
            key_pos: store.randn(p("key_pos"), &[cfg.patches, dc], 0.02, rng)?,
            norm_q: LayerNorm::new(store, &p("norm_q"), dc)?,
            self_attn: MultiHeadAttention::new(store, &p("self_attn"), dc, dc, dc, cfg.heads, rng)?,
            norm_s: LayerNorm::new(store, &p("norm_s"), dc)?,
            norm_vis: LayerNorm::new(store, &p("norm_vis"), dc)?,
            cross_attn: MultiHeadAttention::new(store, &p("cross_attn"), dc, dc, dc, cfg.heads, rng)?,
            norm_c: LayerNorm::new(store, &p("norm_c"), dc)?,
            ffn: FeedForward::new(store, &p("ffn"), dc, 4 * dc, rng)?,
        })
    }

    /// Per-token projection of frozen patch features `[Np, D]` to `[Np, D_cond]`.
    pub fn project_visual<T: Float>(&self, g: &mut Graph<'_, T>, patches: Var) -> Result<Var> {
        self.projector.forward(g, patches)
    }

    /// `Q_s = Q + SA(LN Q)`. Depends only on parameters, so one batch can
    /// share it across samples.
    pub fn self_attend<T: Float>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let q = g.param(self.queries);
        let ln = self.norm_q.forward(g, q)?;
        let qk = if self.cfg.position_embeddings {
            let pos = g.param(self.query_pos);
            g.add(ln, pos)?
        } else {
            ln
        };
        let sa = self.self_attn.forward(g, qk, qk, ln)?;
        g.add(q, sa.out)
    }

    /// `Q_c = Q_s + CA(LN Q_s, LN F_vis)` then `Q_c + FFN(LN Q_c)`.
    pub fn attend_visual<T: Float>(&self, g: &mut Graph<'_, T>, q_s: Var, visual: Var) -> Result<(Var, Var)> {
        let query = self.norm_s.forward(g, q_s)?;
        let vis = self.norm_vis.forward(g, visual)?;
        let key = if self.cfg.position_embeddings {
            let pos = g.param(self.key_pos);
            g.add(vis, pos)?
        } else {
            vis
        };
        let ca = self.cross_attn.forward(g, query, key, vis)?;
        let q_c = g.add(q_s, ca.out)?;
        let h = self.norm_c.forward(g, q_c)?;
        let f = self.ffn.forward(g, h)?;
        Ok((q_c, g.add(q_c, f)?))
    }

    /// Full implicit stream from frozen patch features. `q_s` may carry a
    /// value from [`Self::self_attend`] computed earlier in the same graph.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, patches: Var, q_s: Option<Var>) -> Result<ImplicitTrace> {
        if !g.value(patches).all_finite() {
            return Err(Error::NonFinite("implicit prompt input features".into()));
        }
        let visual = self.project_visual(g, patches)?;
        match self.cfg.adapter {
            AdapterKind::MlpOnly => {
                let out = tile_rows(g, visual, self.cfg.nq)?;
                Ok(ImplicitTrace { visual, q_s: None, q_c: None, out })
            }
            AdapterKind::LearnableQueries => {
                let q_s = match q_s {
                    Some(v) => v,
                    None => self.self_attend(g)?,
                };
                let (q_c, out) = self.attend_visual(g, q_s, visual)?;
                Ok(ImplicitTrace { visual, q_s: Some(q_s), q_c: Some(q_c), out })
            }
        }
    }

    /// Output projections of the three sub-blocks (zeroing them turns the
    /// adapter into the identity on `Q`).
    pub fn residual_outputs(&self) -> Vec<ParamId> {
        let mut v = self.self_attn.output_params();
        v.extend(self.cross_attn.output_params());
        v.extend(self.ffn.fc2.params());
        v
    }
}

/// Rows `0, 1, .., n-1` of `x` taken cyclically (`i mod rows`).
pub fn tile_rows<T: Float>(g: &mut Graph<'_, T>, x: Var, n: usize) -> Result<Var> {
    let rows = g.shape(x)[0];
    let idx: Vec<usize> = (0..n).map(|i| i % rows).collect();
    g.gather_rows(x, &idx)
}

/// Explicit prompt text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub classes: Vec<String>,
}

/// Class words in class-index order, each followed by one space. Duplicates
/// collapse; an empty set falls back to [`BACKGROUND_WORD`].
pub fn build_prompt(class_ids: &[u8], palette: &Palette) -> PromptText {
    let mut ids = class_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let classes: Vec<String> = if ids.is_empty() {
        log::warn!("empty class set; prompt falls back to {BACKGROUND_WORD:?}");
        vec![BACKGROUND_WORD.to_string()]
    } else {
        ids.iter().map(|&c| palette.word(c).to_string()).collect()
    };
    let mut text = String::new();
    for w in &classes {
        text.push_str(w);
        text.push(' ');
    }
    PromptText { text, classes }
}

/// Maps frozen text-token features to conditioning tokens.
#[derive(Clone, Debug)]
pub struct ExplicitPromptModule {
    pub nq: usize,
    pub proj: Linear,
}

impl ExplicitPromptModule {
    pub fn new<T: Float, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &PromptConfig, rng: &mut R) -> Result<Self> {
        Ok(ExplicitPromptModule { nq: cfg.nq, proj: Linear::new(store, prefix, cfg.d_text, cfg.d_cond, true, rng)? })
    }

    /// `[Lt, D]` real-token features to `[Nq, D_cond]`, tiling cyclically.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, token_features: Var) -> Result<Var> {
        let lt = g.shape(token_features)[0];
        if lt == 0 {
            return Err(Error::shape("explicit_embed", "no real tokens"));
        }
        let p = self.proj.forward(g, token_features)?;
        if lt == self.nq {
            return Ok(p);
        }
        tile_rows(g, p, self.nq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_orders_by_class_index_and_dedups() {
        let p = Palette::new(6).unwrap();
        let sky = p.id("sky").unwrap();
        let wall = p.id("wall").unwrap();
        assert_eq!(build_prompt(&[sky, wall], &p).text, "wall sky ");
        assert_eq!(build_prompt(&[p.id("floor").unwrap()], &p).text, "floor ");
        assert_eq!(build_prompt(&[sky, sky, wall, sky], &p).text, "wall sky ");
        let empty = build_prompt(&[], &p);
        assert_eq!(empty.text, "background ");
        assert_eq!(empty.classes, vec!["background"]);
    }
}
