//! Finite-difference gradient suites over the primitives and the model
//! components, at 64-bit.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{scale_invariant_loss, segmentation_loss, DepthHead, SegHead};
use crate::prompt::{AdapterKind, ExplicitPromptModule, ImplicitPromptModule, PromptConfig};
use crate::tensor::{finite_diff_check, GradCheckReport, Graph, ParamId, ParamStore, Tensor, UnaryKind, Var};
use crate::unet::{FeatureBundle, UNet, UNetConfig};

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Entries perturbed per parameter tensor.
const OP_ENTRIES: usize = 64;
const COMPONENT_ENTRIES: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Ops,
    Adapter,
    Unet,
    Heads,
    All,
}

impl FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Scope::Ops,
            "adapter" => Scope::Adapter,
            "unet" => Scope::Unet,
            "heads" => Scope::Heads,
            "all" => Scope::All,
            _ => return Err(Error::Config(format!("unknown gradcheck scope {s:?} (ops, adapter, unet, heads, all)"))),
        })
    }
}

type Build = Box<dyn for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>>;

/// `Σ w ⊙ y` with fixed pseudo-random weights, so every element of `y`
/// reaches the loss with its own coefficient.
pub fn weighted_sum(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(Tensor::uniform(g.shape(y), -1.0, 1.0, &mut r));
    let p = g.mul(y, w).expect("same shape");
    g.sum(p)
}

fn check_all(store: &mut ParamStore<f64>, cases: Vec<(&'static str, Build)>, entries: usize) -> Result<Vec<GradCheckReport>> {
    cases
        .into_iter()
        .map(|(name, f)| finite_diff_check(name, store, |g| f(g), STEP, TOLERANCE, entries))
        .collect()
}

/// One report per primitive group.
pub fn ops_suite() -> Result<Vec<GradCheckReport>> {
    let mut store = ParamStore::<f64>::new();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let a = store.add("a", Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r))?;
    let b = store.add("b", Tensor::uniform(&[4, 5], -1.0, 1.0, &mut r))?;
    let c = store.add("c", Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r))?;
    let gain = store.add("gain", Tensor::uniform(&[4], 0.5, 1.5, &mut r))?;
    let bias = store.add("bias", Tensor::uniform(&[4], -0.5, 0.5, &mut r))?;
    let img = store.add("img", Tensor::uniform(&[2, 5, 6], -1.0, 1.0, &mut r))?;
    let ker = store.add("ker", Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r))?;
    let kb = store.add("kb", Tensor::uniform(&[3], -1.0, 1.0, &mut r))?;
    let pos = store.add("pos", Tensor::uniform(&[3, 4], 0.2, 2.0, &mut r))?;

        let cases: Vec<(&'static str, Build)> = vec![
        ("add/sub/mul", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(c));
            let s = g.add(x, y)?;
            let d = g.sub(s, y)?;
            let m = g.mul(d, y)?;
            Ok(weighted_sum(g, m, 1))
        })),
        ("matmul", Box::new(move |g| {
            let (x, y) = (g.param(a), g.param(b));
            let m = g.matmul(x, y)?;
            Ok(weighted_sum(g, m, 2))
        })),
        ("transpose/permute/reshape", Box::new(move |g| {
            let x = g.param(a);
            let tr = g.transpose(x)?;
            let p = g.permute(tr, &[2, 0, 1])?;
            let rs = g.reshape(p, &[6, 4])?;
            Ok(weighted_sum(g, rs, 3))
        })),
        ("softmax", Box::new(move |g| {
            let x = g.param(a);
            let s0 = g.softmax(x, 0)?;
            let s2 = g.softmax(x, 2)?;
            let s = g.add(s0, s2)?;
            Ok(weighted_sum(g, s, 4))
        })),
        ("layer_norm", Box::new(move |g| {
            let (x, gn, bs) = (g.param(a), g.param(gain), g.param(bias));
            let y = g.layer_norm(x, gn, bs, 1e-5)?;
            Ok(weighted_sum(g, y, 5))
        })),
        ("conv2d", Box::new(move |g| {
            let (x, w, bb) = (g.param(img), g.param(ker), g.param(kb));
            let y = g.conv2d(x, w, Some(bb), 2, 1)?;
            Ok(weighted_sum(g, y, 6))
        })),
        ("attention", Box::new(move |g| {
            let x = g.param(a);
            let y = g.param(c);
            let (o, w) = g.attention(x, y, y)?;
            let lo = weighted_sum(g, o, 7);
            let lw = weighted_sum(g, w, 8);
            g.add(lo, lw)
        })),
        ("resize_bilinear", Box::new(move |g| {
            let x = g.param(img);
            let up = g.resize_bilinear(x, 9, 13)?;
            let down = g.resize_bilinear(x, 2, 3)?;
            let lu = weighted_sum(g, up, 9);
            let ld = weighted_sum(g, down, 10);
            g.add(lu, ld)
        })),
        ("concat/gather/broadcast", Box::new(move |g| {
            let (x, y, bs) = (g.param(a), g.param(c), g.param(bias));
            let cat = g.concat(&[x, y], 1)?;
            let bc = g.add_broadcast(cat, bs)?;
            let rows = g.gather_rows(bc, &[1, 0, 1, 1])?;
            let sc = g.param(gain);
            let rows = g.mul_broadcast(rows, sc)?;
            let p = g.param(pos);
            let s = g.sum(p);
            let rows = g.mul_broadcast(rows, s)?;
            Ok(weighted_sum(g, rows, 11))
        })),
        ("channel_bias/sum_axis", Box::new(move |g| {
            let (x, bb) = (g.param(img), g.param(kb));
            let kv = g.param(ker);
            let y = g.conv2d(x, kv, None, 1, 1)?;
            let y = g.channel_bias(y, bb)?;
            let s = g.sum_axis(y, 1)?;
            Ok(weighted_sum(g, s, 12))
        })),
        ("unary", Box::new(move |g| {
            let x = g.param(a);
            let p = g.param(pos);
            let mut total = Vec::new();
            for (i, k) in [UnaryKind::Gelu, UnaryKind::Silu, UnaryKind::Sigmoid, UnaryKind::Tanh, UnaryKind::Softplus, UnaryKind::Exp, UnaryKind::Square]
                .into_iter()
                .enumerate()
            {
                let y = g.unary(x, k);
                total.push(weighted_sum(g, y, 20 + i as u64));
            }
            let l = g.log(p);
            total.push(weighted_sum(g, l, 30));
            let rs = g.rsqrt(p);
            total.push(weighted_sum(g, rs, 31));
            let s = g.scale(total[0], 0.7);
            let mut acc = g.add_scalar(s, 0.1);
            for &v in &total[1..] {
                acc = g.add(acc, v)?;
            }
            Ok(acc)
        })),
        ("cross_entropy", Box::new(move |g| {
            let x = g.param(a);
            let logits = g.reshape(x, &[2, 12])?;
            let targets = [0u32, 1, 255, 1, 0, 0, 255, 1, 1, 0, 1, 0];
            g.cross_entropy(logits, &targets, 255)
        })),
    ];
    check_all(&mut store, cases, OP_ENTRIES)
}

/// Miniature prompt-module shapes.
fn mini_prompt(adapter: AdapterKind) -> PromptConfig {
    PromptConfig { nq: 6, d_text: 10, d_cond: 8, patches: 5, heads: 2, position_embeddings: true, adapter }
}

/// Implicit adapter (both kinds) and the explicit projection.
pub fn adapter_suite() -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let patches = Tensor::<f64>::uniform(&[5, 10], -1.0, 1.0, &mut r);
    for (label, adapter) in [("adapter/learnable_queries", AdapterKind::LearnableQueries), ("adapter/mlp_only", AdapterKind::MlpOnly)] {
        let mut store = ParamStore::<f64>::new();
        let m = ImplicitPromptModule::new(&mut store, "prompt", mini_prompt(adapter), &mut r)?;
        let p = patches.clone();
        let f: Build = Box::new(move |g| {
            let x = g.constant(p.clone());
            let out = m.forward(g, x, None)?.out;
            Ok(weighted_sum(g, out, 22))
        });
        reports.extend(check_all(&mut store, vec![(label, f)], COMPONENT_ENTRIES)?);
    }
    let mut store = ParamStore::<f64>::new();
    let e = ExplicitPromptModule::new(&mut store, "text_proj", &mini_prompt(AdapterKind::LearnableQueries), &mut r)?;
    let tokens = Tensor::<f64>::uniform(&[4, 10], -1.0, 1.0, &mut r);
    let f: Build = Box::new(move |g| {
        let x = g.constant(tokens.clone());
        let out = e.forward(g, x)?;
        Ok(weighted_sum(g, out, 23))
    });
    reports.extend(check_all(&mut store, vec![("adapter/explicit", f)], COMPONENT_ENTRIES)?);
    Ok(reports)
}

/// A four-level UNet with two cross-attention blocks on each side, 8×8
/// latent. The conditioning is a parameter so its gradient is checked too.
pub fn unet_suite() -> Result<Vec<GradCheckReport>> {
    let cfg = UNetConfig {
        in_channels: 3,
        channels: [4, 6, 6, 8],
        encoder_attention: [true, true, false, false],
        decoder_attention: [true, true, false, false],
        d_cond: 4,
        nq: 3,
        time_dim: 4,
        heads: 2,
    };
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let mut store = ParamStore::<f64>::new();
    let unet = UNet::new(&mut store, "unet", cfg, &mut r)?;
    let cond = store.add("cond", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r))?;
    let z0 = Tensor::<f64>::uniform(&[3, 8, 8], -1.0, 1.0, &mut r);
    let f: Build = Box::new(move |g| {
        let z = g.constant(z0.clone());
        let c = g.param(cond);
        let fb = unet.forward(g, z, c, 0)?;
        let mut acc = weighted_sum(g, fb.f_ca, 40);
        for (i, &t) in fb.taps.iter().enumerate() {
            let l = weighted_sum(g, t, 41 + i as u64);
            acc = g.add(acc, l)?;
        }
        Ok(acc)
    });
    check_all(&mut store, vec![("unet", f)], COMPONENT_ENTRIES)
}

/// Both heads with their losses, on parameter feature taps.
pub fn heads_suite() -> Result<Vec<GradCheckReport>> {
    let channels = [4, 5, 5, 6];
    let mut r = ChaCha8Rng::seed_from_u64(51);
    let mut store = ParamStore::<f64>::new();
    let sizes = [4usize, 2, 1, 1];
    let mut taps = Vec::new();
    for (l, (&c, &s)) in channels.iter().zip(&sizes).enumerate() {
        taps.push(store.add(format!("tap{l}"), Tensor::uniform(&[c, s, s], -1.0, 1.0, &mut r))?);
    }
    let taps: [ParamId; 4] = taps.try_into().expect("four levels");
    let f_ca = store.add("f_ca", Tensor::uniform(&[3, 4, 4], 0.0, 1.0, &mut r))?;
    let seg = SegHead::new(&mut store, "seg", channels, 3, 4, 3, &mut r)?;
    let depth = DepthHead::new(&mut store, "depth", channels, 3, 4, 2.0, &mut r)?;
    let bundle = move |g: &mut Graph<'_, f64>| FeatureBundle {
        taps: [g.param(taps[0]), g.param(taps[1]), g.param(taps[2]), g.param(taps[3])],
        f_ca: g.param(f_ca),
        attention_maps: Vec::new(),
    };
    let mask: Vec<u8> = (0..64).map(|i| if i % 11 == 0 { 255 } else { (i % 3) as u8 }).collect();
    let gt: Vec<f32> = (0..64).map(|i| 0.5 + (i % 7) as f32 * 0.4).collect();
    let valid: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
    let seg_case: Build = Box::new(move |g| {
        let fb = bundle(g);
        let logits = seg.forward(g, &fb, 8, 8)?;
        segmentation_loss(g, logits, &mask)
    });
    let depth_case: Build = Box::new(move |g| {
        let fb = bundle(g);
        let d = depth.forward(g, &fb, 8, 8)?;
        scale_invariant_loss(g, d, &gt, &valid, 0.5)
    });
    check_all(&mut store, vec![("heads/segmentation", seg_case), ("heads/depth", depth_case)], COMPONENT_ENTRIES)
}

pub fn run_suite(scope: Scope) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        out.extend(ops_suite()?);
    }
    if matches!(scope, Scope::Adapter | Scope::All) {
        out.extend(adapter_suite()?);
    }
    if matches!(scope, Scope::Unet | Scope::All) {
        out.extend(unet_suite()?);
    }
    if matches!(scope, Scope::Heads | Scope::All) {
        out.extend(heads_suite()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::set_backward_fault;

    #[test]
    fn component_suites_pass() {
        for scope in [Scope::Adapter, Scope::Unet, Scope::Heads] {
            for r in run_suite(scope).unwrap() {
                assert!(r.passed(), "{}: max rel err {:e}: {:#?}", r.label, r.max_rel_err(), r.failures().collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn corrupted_rule_fails_the_named_group() {
        set_backward_fault(Some("layer_norm"));
        let reports = ops_suite();
        set_backward_fault(None);
        let failed: Vec<String> = reports.unwrap().into_iter().filter(|r| !r.passed()).map(|r| r.label).collect();
        assert_eq!(failed, vec!["layer_norm"]);
    }
}
