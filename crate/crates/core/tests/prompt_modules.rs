use iedp::prompt::{build_prompt, tile_rows, AdapterKind, ExplicitPromptModule, ImplicitPromptModule, PromptConfig};
use iedp::synth::Palette;
use iedp::tensor::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::*;

#[test]
fn implicit_embed_matches_recomputation_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for draw in 0..100 {
        let cfg = small_cfg(rng.random_range(1..24), [1, 2, 4][draw % 3], draw % 4 != 0);
        let mut store = ParamStore::new();
        let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
        randomize(&mut store, &mut rng);
        let patches = Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng);
        let a = implicit(&store, &m, &patches);
        let b = recompute(&store, &m, &patches);
        assert_eq!(a.shape(), &[cfg.nq, cfg.d_cond]);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "draw {draw} differs");
    }
}

#[test]
fn zeroed_residual_writers_pass_queries_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = small_cfg(7, 2, true);
    let mut store = ParamStore::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    for id in m.residual_outputs() {
        store.get_mut(id).value.fill(0.0);
    }
    let patches = Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng);
    assert_eq!(implicit(&store, &m, &patches).data(), store.value(m.queries).data());
}

#[test]
fn key_order_is_irrelevant_without_key_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = small_cfg(5, 2, false);
    let mut store = ParamStore::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    randomize(&mut store, &mut rng);
    let patches = Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng);
    let d = cfg.d_text;
    let mut reversed = patches.clone();
    for r in 0..cfg.patches {
        let src = &patches.data()[(cfg.patches - 1 - r) * d..(cfg.patches - r) * d];
        reversed.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
    }
    let a = implicit(&store, &m, &patches);
    let b = implicit(&store, &m, &reversed);
    assert!(a.max_abs_diff(&b) < 1e-12);

    // With key positions the order matters.
    let mut store2 = ParamStore::new();
    let m2 = ImplicitPromptModule::new(&mut store2, "prompt", small_cfg(5, 2, true), &mut rng).unwrap();
    randomize(&mut store2, &mut rng);
    assert!(implicit(&store2, &m2, &patches).max_abs_diff(&implicit(&store2, &m2, &reversed)) > 1e-6);
}

#[test]
fn gradient_reaches_the_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = PromptConfig::default();
    let mut store = ParamStore::<f64>::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    let mut g = Graph::with_store(&store);
    let p = g.constant(Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng));
    let out = m.forward(&mut g, p, None).unwrap().out;
    let sq = g.square(out);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let gq = grads.params().find(|(id, _)| *id == m.queries).unwrap().1;
    assert!(gq.data().iter().any(|v| *v != 0.0));
    assert!(store.iter().filter(|(_, p)| p.name.starts_with("prompt.")).all(|(_, p)| !p.frozen));
}

#[test]
fn projector_keeps_token_count_and_is_affine_with_zero_second_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = PromptConfig::default();
    let mut store = ParamStore::<f64>::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    for id in m.projector.fc2.params() {
        store.get_mut(id).value.fill(0.0);
    }
    let mut g = Graph::with_store(&store);
    let x = g.constant(Tensor::randn(&[64, cfg.d_text], 1.0, &mut rng));
    let v = m.project_visual(&mut g, x).unwrap();
    let affine = m.projector.fc1.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(v), &[64, cfg.d_cond]);
    assert_eq!(g.value(v).data(), g.value(affine).data());
}

#[test]
fn mlp_adapter_tiles_projected_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = PromptConfig { adapter: AdapterKind::MlpOnly, ..small_cfg(23, 2, true) };
    let mut store = ParamStore::<f64>::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    let patches = Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng);
    let out = implicit(&store, &m, &patches);
    assert_eq!(out.shape(), &[23, cfg.d_cond]);
    let d = cfg.d_cond;
    assert_eq!(out.data()[..d], out.data()[10 * d..11 * d]);
}

#[test]
fn non_finite_features_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = small_cfg(4, 1, true);
    let mut store = ParamStore::<f64>::new();
    let m = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
    let mut patches = Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng);
    patches.data_mut()[3] = f64::NAN;
    let mut g = Graph::with_store(&store);
    let p = g.constant(patches);
    assert!(m.forward(&mut g, p, None).is_err());
}

#[test]
fn tiling_repeats_rows_cyclically() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[4, 1], &[0.0, 1.0, 2.0, 3.0]).unwrap());
    let t = tile_rows(&mut g, x, 10).unwrap();
    assert_eq!(g.value(t).to_f64_vec(), vec![0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0, 0.0, 1.0]);
}

#[test]
fn explicit_stream_is_the_projection_when_lengths_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = small_cfg(6, 2, true);
    let mut store = ParamStore::<f64>::new();
    let m = ExplicitPromptModule::new(&mut store, "text_proj", &cfg, &mut rng).unwrap();
    let mut g = Graph::with_store(&store);
    let t = g.constant(Tensor::randn(&[6, cfg.d_text], 1.0, &mut rng));
    let out = m.forward(&mut g, t).unwrap();
    let direct = m.proj.forward(&mut g, t).unwrap();
    assert_eq!(g.value(out).data(), g.value(direct).data());
}

#[test]
fn prompt_words_all_come_from_the_class_set() {
    let p = Palette::new(8).unwrap();
    let ids = [5u8, 1, 5, 3];
    let prompt = build_prompt(&ids, &p);
    let words: Vec<&str> = prompt.text.split_whitespace().collect();
    assert_eq!(words, vec![p.word(1), p.word(3), p.word(5)]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn both_streams_emit_nq_by_d_cond(nq in 1usize..40, lt in 1usize..16, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = small_cfg(nq, 2, true);
        let mut store = ParamStore::<f64>::new();
        let imp = ImplicitPromptModule::new(&mut store, "prompt", cfg, &mut rng).unwrap();
        let exp = ExplicitPromptModule::new(&mut store, "text_proj", &cfg, &mut rng).unwrap();
        let mut g = Graph::with_store(&store);
        let p = g.constant(Tensor::randn(&[cfg.patches, cfg.d_text], 1.0, &mut rng));
        let t = g.constant(Tensor::randn(&[lt, cfg.d_text], 1.0, &mut rng));
        let a = imp.forward(&mut g, p, None).unwrap().out;
        let b = exp.forward(&mut g, t).unwrap();
        prop_assert_eq!(g.shape(a), &[nq, cfg.d_cond]);
        prop_assert_eq!(g.shape(b), &[nq, cfg.d_cond]);
        prop_assert!(g.value(a).all_finite() && g.value(b).all_finite());
    }

    #[test]
    fn prompt_is_sorted_deduplicated_words(ids in proptest::collection::vec(0u8..12, 1..20)) {
        let p = Palette::new(12).unwrap();
        let prompt = build_prompt(&ids, &p);
        let mut want: Vec<u8> = ids.clone();
        want.sort_unstable();
        want.dedup();
        let expected: String = want.iter().map(|&c| format!("{} ", p.word(c))).collect();
        prop_assert_eq!(prompt.text, expected);
    }
}
