use std::collections::BTreeMap;

use iedp::heads::Task;
use iedp::model::{Model, ModelConfig, Target, TaskHead, FROZEN_PREFIXES};
use iedp::optim::{AdamW, AdamWConfig};
use iedp::prompt::build_prompt;
use iedp::tensor::{Graph, Tensor};
use iedp::train::{branch_losses, BatchItem};
use iedp::unet::count_cross_attention_blocks;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn branches_reach_the_same_shared_parameters() {
    let m = seg_model(64);
    let s = samples(1, 64);
    let frozen = m.frozen_image(&s[0].image.cast()).unwrap();
    let text = m.frozen_text(&build_prompt(&s[0].classes, &m.palette).text).unwrap();
    let mut g = Graph::with_store(&m.store);
    let item = BatchItem { frozen: &frozen, text: Some(&text), target: Target::Segmentation(&s[0].mask) };
    let l = branch_losses(&m, &mut g, &[item], None, 0.5).unwrap();

    let shared = |root, private: &str| {
        names(&m, g.reachable_params(root)).into_iter().filter(|(_, n)| !n.starts_with(private)).collect::<BTreeMap<_, _>>()
    };
    let imp = shared(l.imp, "prompt.");
    let exp = shared(l.exp.unwrap(), "text_proj.");
    assert_eq!(imp, exp);
    assert!(imp.values().any(|n| n.starts_with("unet.")) && imp.values().any(|n| n.starts_with("head.")));
    assert!(imp.values().all(|n| FROZEN_PREFIXES.iter().all(|p| !n.starts_with(p))));
    // Nothing outside the private modules is missing from either side.
    let all_trainable = m.store.iter().filter(|(_, p)| !p.frozen).count();
    let private = m.store.iter().filter(|(_, p)| p.name.starts_with("prompt.") || p.name.starts_with("text_proj.")).count();
    assert_eq!(imp.len(), all_trainable - private);
}

#[test]
fn total_gradient_is_the_sum_of_branch_gradients() {
    let m = seg_model(64);
    let s = samples(2, 64);
    let frozen: Vec<_> = s.iter().map(|x| m.frozen_image(&x.image.cast()).unwrap()).collect();
    let texts: Vec<_> = s.iter().map(|x| m.frozen_text(&build_prompt(&x.classes, &m.palette).text).unwrap()).collect();
    let items: Vec<_> = (0..2)
        .map(|i| BatchItem { frozen: &frozen[i], text: Some(&texts[i]), target: Target::Segmentation(&s[i].mask) })
        .collect();
    let mut g = Graph::with_store(&m.store);
    let l = branch_losses(&m, &mut g, &items, None, 0.5).unwrap();
    let total = g.backward(l.total).unwrap();
    let imp = g.backward(l.imp).unwrap();
    let exp = g.backward(l.exp.unwrap()).unwrap();

    let lookup = |grads: &iedp::tensor::Gradients<f64>, id| grads.params().find(|(p, _)| *p == id).map(|(_, t)| t.to_f64_vec());
    let mut checked = 0;
    let mut worst = 0.0f64;
    for (id, t) in total.params() {
        let a = lookup(&imp, id).unwrap_or_else(|| vec![0.0; t.numel()]);
        let b = lookup(&exp, id).unwrap_or_else(|| vec![0.0; t.numel()]);
        for ((x, y), z) in t.data().iter().zip(&a).zip(&b) {
            worst = worst.max((x - (y + z)).abs());
        }
        checked += 1;
    }
    assert!(checked > 50);
    assert!(worst < 1e-9, "max diff {worst:e}");
    let lt = g.value(l.total).item();
    assert_eq!(lt, g.value(l.imp).item() + g.value(l.exp.unwrap()).item());
}

#[test]
fn identical_conditioning_gives_identical_branch_losses() {
    let m = seg_model(64);
    let s = samples(1, 64);
    let frozen = m.frozen_image(&s[0].image.cast()).unwrap();
    let mut g = Graph::with_store(&m.store);
    let cond = m.main_condition(&mut g, &frozen.patches, None, None).unwrap();
    let mut loss = || {
        let z0 = g.constant(frozen.z0.clone());
        let (_, out) = m.decode(&mut g, z0, cond).unwrap();
        let l = m.task_loss(&mut g, out, Target::Segmentation(&s[0].mask), 0.5).unwrap();
        g.value(l).item()
    };
    let (a, b) = (loss(), loss());
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn default_streams_are_256_by_32() {
    let m = Model::<f32>::new(ModelConfig::new(Task::Segmentation, 6), 0).unwrap();
    assert_eq!(m.cfg.prompt.nq, 256);
    let s = samples(1, 64);
    let frozen = m.frozen_image(&s[0].image).unwrap();
    let text = m.frozen_text("wall sky ").unwrap();
    let mut g = Graph::with_store(&m.store);
    let a = m.main_condition(&mut g, &frozen.patches, None, None).unwrap();
    let b = m.explicit_condition(&mut g, &text).unwrap();
    assert_eq!(g.shape(a), &[256, 32]);
    assert_eq!(g.shape(b), &[256, 32]);
}

#[test]
fn feature_pyramid_and_attention_contracts() {
    let m = Model::<f32>::new(ModelConfig::new(Task::Segmentation, 6), 0).unwrap();
    assert_eq!(count_cross_attention_blocks(&m.cfg.unet), (2, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (h, w) in [(64, 64), (128, 64), (64, 192), (128, 128)] {
        let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let z = m.latent.encode(&m.store, &image).unwrap();
        assert_eq!(z.shape()[1..], [h / 8, w / 8]);
        let mut g = Graph::with_store(&m.store);
        let cond = g.constant(Tensor::randn(&[256, 32], 1.0, &mut rng));
        let z0 = g.constant(z);
        let (f, out) = m.decode(&mut g, z0, cond).unwrap();
        assert_eq!(g.shape(out), &[6, h, w]);
        for (l, &tap) in f.taps.iter().enumerate() {
            let stride = 8 << l;
            assert_eq!(g.shape(tap)[1..], [h / stride, w / stride], "tap {l} at {h}x{w}");
        }
        assert_eq!(f.attention_maps.len(), 4);
        for &a in &f.attention_maps {
            let t = g.value(a);
            let k = t.shape()[1];
            for row in t.data().chunks(k) {
                let s: f64 = row.iter().map(|&v| v as f64).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let fca = g.value(f.f_ca);
        assert_eq!(fca.shape(), &[256, h / 8, w / 8]);
        let plane = h / 8 * w / 8;
        for p in 0..plane {
            let s: f64 = (0..256).map(|k| fca.data()[k * plane + p] as f64).sum();
            assert!((s - 1.0).abs() < 1e-4, "pixel {p}: {s}");
        }
        assert!(fca.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn conditioning_changes_the_finest_tap_and_decoding_is_deterministic() {
    let m = Model::<f32>::new(ModelConfig::new(Task::Segmentation, 6).with_nq(64), 0).unwrap();
    let s = samples(1, 64);
    let z = m.frozen_image(&s[0].image).unwrap().z0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let c1 = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let c2 = Tensor::randn(&[64, 32], 1.0, &mut rng);
    let tap = |c: &Tensor<f32>| {
        let mut g = Graph::with_store(&m.store);
        let (z0, cond) = (g.constant(z.clone()), g.constant(c.clone()));
        let f = m.unet.forward(&mut g, z0, cond, 0).unwrap();
        g.value(f.taps[0]).clone()
    };
    assert!(tap(&c1).max_abs_diff(&tap(&c2)) > 0.0);
    assert_eq!(tap(&c1).data(), tap(&c1).data());

    let mut g = Graph::with_store(&m.store);
    let (z0, cond) = (g.constant(z.clone()), g.constant(c1));
    assert!(m.unet.forward(&mut g, z0, cond, 5).is_err());
}

#[test]
fn decoder_only_attention_is_rejected() {
    let mut cfg = ModelConfig::new(Task::Segmentation, 6);
    cfg.unet.encoder_attention = [false; 4];
    assert!(cfg.validate().is_err());
    assert!(Model::<f32>::new(cfg, 0).is_err());
}

#[test]
fn one_step_leaves_encoders_untouched_and_moves_the_unet() {
    let mut m = Model::<f32>::new(ModelConfig::new(Task::Segmentation, 6).with_nq(64), 3).unwrap();
    let before = m.store.clone();
    let s = samples(2, 64);
    let frozen: Vec<_> = s.iter().map(|x| m.frozen_image(&x.image).unwrap()).collect();
    let texts: Vec<_> = s.iter().map(|x| m.frozen_text(&x.caption).unwrap()).collect();
    let items: Vec<_> = (0..2)
        .map(|i| BatchItem { frozen: &frozen[i], text: Some(&texts[i]), target: Target::Segmentation(&s[i].mask) })
        .collect();
    let grads = {
        let mut g = Graph::with_store(&m.store);
        let l = branch_losses(&m, &mut g, &items, None, 0.5).unwrap();
        g.backward(l.total).unwrap()
    };
    m.store.zero_grads();
    grads.accumulate_into(&mut m.store);
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut m.store, 1e-3);

    let mut unet_moved = false;
    for ((_, a), (_, b)) in before.iter().zip(m.store.iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if a.frozen {
            assert!(same, "{} moved", a.name);
        } else if a.name.starts_with("unet.") && !same {
            unet_moved = true;
        }
    }
    assert!(unet_moved);
    assert!(m.store.iter().any(|(_, p)| p.frozen && p.name.starts_with("latent.")));
    assert!(m.store.iter().any(|(_, p)| p.frozen && p.name.starts_with("clip.")));
}

#[test]
fn inference_ignores_the_explicit_projection() {
    let mut m = seg_model(64);
    let image: Tensor<f64> = samples(1, 64)[0].image.cast();
    let a = m.predict(&image).unwrap();
    let ids: Vec<_> = m.store.iter().filter(|(_, p)| p.name.starts_with("text_proj.")).map(|(id, _)| id).collect();
    assert!(!ids.is_empty());
    for id in ids {
        m.store.get_mut(id).value.fill(f64::NAN);
    }
    let b = m.predict(&image).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(m.predict(&image).unwrap().data(), b.data());
}

#[test]
fn depth_head_is_positive_for_random_weights() {
    let mut m = Model::<f32>::new(ModelConfig::new(Task::Depth, 6).with_nq(64), 2).unwrap();
    if let TaskHead::Depth(h) = &m.head {
        let w = h.regressor.w;
        let shape = m.store.value(w).shape().to_vec();
        m.store.get_mut(w).value = Tensor::randn(&shape, 3.0, &mut ChaCha8Rng::seed_from_u64(4));
    }
    let d = m.predict(&samples(1, 64)[0].image).unwrap();
    assert_eq!(d.shape(), &[1, 64, 64]);
    assert!(d.data().iter().all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn zero_classifier_gives_uniform_probabilities() {
    let m = Model::<f64>::new(ModelConfig::new(Task::Segmentation, 6).with_nq(64), 2).unwrap();
    let s = samples(1, 64);
    let logits = m.predict(&s[0].image.cast()).unwrap();
    let plane = 64 * 64;
    for p in [0, 100, plane - 1] {
        let col: Vec<f64> = (0..6).map(|c| logits.data()[c * plane + p]).collect();
        assert!(col.iter().all(|&v| (v - col[0]).abs() < 1e-12));
    }
    let mut g = Graph::with_store(&m.store);
    let frozen = m.frozen_image(&s[0].image.cast()).unwrap();
    let cond = m.main_condition(&mut g, &frozen.patches, None, None).unwrap();
    let z0 = g.constant(frozen.z0);
    let (_, out) = m.decode(&mut g, z0, cond).unwrap();
    let l = m.task_loss(&mut g, out, Target::Segmentation(&s[0].mask), 0.5).unwrap();
    assert!((g.value(l).item() - 6f64.ln()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn strides_hold_for_multiples_of_64(hm in 1usize..4, wm in 1usize..4, seed in 0u64..100) {
        let mut cfg = ModelConfig::new(Task::Segmentation, 6).with_nq(8);
        cfg.unet.channels = [8, 8, 8, 8];
        cfg.unet.heads = 2;
        cfg.fpn_width = 8;
        let m = Model::<f32>::new(cfg, seed).unwrap();
        let (h, w) = (64 * hm, 64 * wm);
        let image = Tensor::uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let z = m.latent.encode(&m.store, &image).unwrap();
        let mut g = Graph::with_store(&m.store);
        let cond = g.constant(Tensor::randn(&[8, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(seed + 1)));
        let z0 = g.constant(z);
        let (f, _) = m.decode(&mut g, z0, cond).unwrap();
        for (l, &tap) in f.taps.iter().enumerate() {
            prop_assert_eq!(&g.shape(tap)[1..], &[h / (8 << l), w / (8 << l)]);
        }
        let fca = g.value(f.f_ca);
        let plane = h / 8 * w / 8;
        for p in 0..plane {
            let s: f64 = (0..8).map(|k| fca.data()[k * plane + p] as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-4);
        }
    }
}
