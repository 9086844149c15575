use std::collections::BTreeSet;

use iedp::dataset::{write_dataset, Dataset, DEPTH_SCALE};
use iedp::synth::{generate_scene, generate_sample, render, Palette, Plane, SceneObject, SceneSpec, Shape, IGNORE_LABEL};
use proptest::prelude::*;

#[test]
fn single_object_scene_has_two_classes() {
    let p = Palette::new(6).unwrap();
    let spec = SceneSpec {
        seed: 1,
        size: 64,
        background: 0,
        background_color: [0.5, 0.5, 0.5],
        background_depth: 9.0,
        objects: vec![SceneObject {
            class: 4,
            shape: Shape::Disk { cx: 30.0, cy: 30.0, r: 10.0 },
            color: [0.2, 0.4, 0.6],
            plane: Plane { a: 0.0, b: 0.0, c: 3.0 },
        }],
    };
    let s = render(&spec, &p);
    assert_eq!(s.classes, vec![0, 4]);
    assert_eq!(s.depth[30 * 64 + 30], 3.0);
    assert_eq!(s.mask[0], 0);
}

#[test]
fn nearer_surfaces_win_at_every_pixel() {
    let p = Palette::new(8).unwrap();
    for seed in 0..60 {
        let spec = generate_scene(seed, &p, 64).unwrap();
        let s = render(&spec, &p);
        for y in 0..64 {
            for x in 0..64 {
                let (u, v) = (x as f32 / 64.0, y as f32 / 64.0);
                let mut best = (spec.background_depth, spec.background);
                for o in &spec.objects {
                    if o.shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        let d = o.plane.depth_at(u, v);
                        if d < best.0 {
                            best = (d, o.class);
                        }
                    }
                }
                let i = y * 64 + x;
                assert_eq!((s.depth[i], s.mask[i]), best, "seed {seed} pixel ({x}, {y})");
            }
        }
    }
}

#[test]
fn every_class_appears_in_enough_scenes() {
    let p = Palette::new(6).unwrap();
    let mut seen = vec![0usize; 6];
    for seed in 0..1000 {
        for c in generate_sample(seed, &p, 64).unwrap().classes {
            seen[c as usize] += 1;
        }
    }
    assert!(seen.iter().all(|&n| n >= 50), "{seen:?}");
}

#[test]
fn written_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = Palette::new(6).unwrap();
    let manifest = write_dataset(20, dir.path(), &[0.75, 0.25], 3, 64, &p).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.split("train").unwrap().len(), 15);
    assert_eq!(ds.split("val").unwrap().len(), 5);
    for i in 0..ds.len() {
        let fresh = ds.sample(i).unwrap();
        let mask = ds.mask(i).unwrap();
        let depth = ds.depth(i).unwrap();
        assert_eq!(mask, fresh.mask);
        assert!(depth.iter().zip(&fresh.depth).all(|(a, b)| (a - b).abs() as f64 <= DEPTH_SCALE / 2.0 + 1e-6));
        assert_eq!(ds.image(i).unwrap().data(), fresh.image.data());
        let from_mask: BTreeSet<String> =
            mask.iter().filter(|&&m| m != IGNORE_LABEL).map(|&m| p.word(m).to_string()).collect();
        let listed: BTreeSet<String> = manifest.samples[i].classes.iter().cloned().collect();
        assert_eq!(from_mask, listed);
        assert!(depth.iter().all(|&d| d > 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn samples_are_consistent(seed in 0u64..1_000_000, k in 6usize..13) {
        let p = Palette::new(k).unwrap();
        let a = generate_sample(seed, &p, 64).unwrap();
        prop_assert_eq!(&a, &generate_sample(seed, &p, 64).unwrap());
        let present: BTreeSet<u8> = a.mask.iter().copied().collect();
        prop_assert_eq!(present, a.classes.iter().copied().collect::<BTreeSet<u8>>());
        prop_assert!(a.depth.iter().all(|&d| d > 0.0));
        prop_assert!(a.mask.iter().all(|&m| (m as usize) < k));
        for w in a.class_words(&p) {
            prop_assert_eq!(a.caption.split_whitespace().filter(|t| *t == w).count(), 1);
        }
    }
}
