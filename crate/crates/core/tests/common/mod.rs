#![allow(dead_code)]

use std::collections::BTreeMap;

use iedp::eval::DepthMetrics;
use iedp::heads::Task;
use iedp::model::{Model, ModelConfig, TaskHead};
use iedp::prompt::{AdapterKind, ImplicitPromptModule, PromptConfig};
use iedp::synth::{generate_sample, Palette, Sample, IGNORE_LABEL};
use iedp::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn small_cfg(nq: usize, heads: usize, pe: bool) -> PromptConfig {
    PromptConfig { nq, d_text: 12, d_cond: 8, patches: 10, heads, position_embeddings: pe, adapter: AdapterKind::LearnableQueries }
}

/// Replaces every parameter (including layer-norm gains and biases) with noise.
pub fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::randn(&shape, 0.5, rng);
    }
}

pub fn implicit(store: &ParamStore<f64>, m: &ImplicitPromptModule, patches: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::with_store(store);
    let p = g.constant(patches.clone());
    let out = m.forward(&mut g, p, None).unwrap().out;
    g.value(out).clone()
}

/// Query self-attention, visual cross-attention and the feed-forward update,
/// each a pre-norm residual step, recomposed from the building blocks.
pub fn recompute(store: &ParamStore<f64>, m: &ImplicitPromptModule, patches: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::with_store(store);
    let pe = m.cfg.position_embeddings;
    let with_pos = |g: &mut Graph<'_, f64>, x: Var, pos| if pe { let p = g.param(pos); g.add(x, p).unwrap() } else { x };

    let q = g.param(m.queries);
    let x = g.constant(patches.clone());
    let f_vis = m.projector.forward(&mut g, x).unwrap();

    let ln_q = m.norm_q.forward(&mut g, q).unwrap();
    let qk = with_pos(&mut g, ln_q, m.query_pos);
    let sa = m.self_attn.forward(&mut g, qk, qk, ln_q).unwrap().out;
    let q_s = g.add(q, sa).unwrap();

    let ln_s = m.norm_s.forward(&mut g, q_s).unwrap();
    let ln_v = m.norm_vis.forward(&mut g, f_vis).unwrap();
    let keys = with_pos(&mut g, ln_v, m.key_pos);
    let ca = m.cross_attn.forward(&mut g, ln_s, keys, ln_v).unwrap().out;
    let q_c = g.add(q_s, ca).unwrap();

    let ln_c = m.norm_c.forward(&mut g, q_c).unwrap();
    let ff = m.ffn.forward(&mut g, ln_c).unwrap();
    let out = g.add(q_c, ff).unwrap();
    g.value(out).clone()
}

pub fn samples(n: usize, size: usize) -> Vec<Sample> {
    let palette = Palette::new(6).unwrap();
    (0..n).map(|i| generate_sample(100 + i as u64, &palette, size).unwrap()).collect()
}

/// Segmentation model with a random classifier so gradients reach the trunk.
pub fn seg_model(nq: usize) -> Model<f64> {
    let mut m = Model::<f64>::new(ModelConfig::new(Task::Segmentation, 6).with_nq(nq), 11).unwrap();
    if let TaskHead::Segmentation(h) = &m.head {
        let w = h.classifier.w;
        let shape = m.store.value(w).shape().to_vec();
        m.store.get_mut(w).value = Tensor::randn(&shape, 0.1, &mut ChaCha8Rng::seed_from_u64(1));
    }
    m
}

pub fn names(m: &Model<f64>, ids: impl IntoIterator<Item = ParamId>) -> BTreeMap<ParamId, String> {
    ids.into_iter().map(|id| (id, m.store.get(id).name.clone())).collect()
}

pub fn miou_by_pixels(pred: &[u8], gt: &[u8], k: usize) -> Option<f64> {
    let mut ious = Vec::new();
    for c in 0..k as u8 {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &t) in pred.iter().zip(gt) {
            if t == IGNORE_LABEL {
                continue;
            }
            if p == c && t == c {
                inter += 1;
            }
            if p == c || t == c {
                union += 1;
            }
        }
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
}

pub fn depth_by_pixels(pred: &[f32], gt: &[f32], valid: &[bool]) -> DepthMetrics {
    let idx: Vec<usize> = (0..pred.len()).filter(|&i| valid[i]).collect();
    let n = idx.len() as f64;
    let p = |i: usize| pred[i] as f64;
    let t = |i: usize| gt[i] as f64;
    let frac = |k: i32| idx.iter().filter(|&&i| (p(i) / t(i)).max(t(i) / p(i)) < 1.25f64.powi(k)).count() as f64 / n;
    DepthMetrics {
        rmse: (idx.iter().map(|&i| (p(i) - t(i)).powi(2)).sum::<f64>() / n).sqrt(),
        rel: idx.iter().map(|&i| (p(i) - t(i)).abs() / t(i)).sum::<f64>() / n,
        log10: idx.iter().map(|&i| (p(i).log10() - t(i).log10()).abs()).sum::<f64>() / n,
        delta1: frac(1),
        delta2: frac(2),
        delta3: frac(3),
    }
}
