use kshot_core::dataset::DatasetSpec;
use kshot_core::discriminator::select_class_score;
use kshot_core::evaluator::metrics::{dipd, fid, inception_score, top_k_accuracy};
use kshot_core::fewshot::make_splits;
use kshot_core::generator::{Generator, GeneratorConfig};
use kshot_core::losses::feature_matching_loss;
use kshot_core::presets;
use kshot_core::synth::synthetic_corpus;
use kshot_core::tensor::{grad, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob_rows(max_rows: usize, classes: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(1e-6f64..1.0, classes), 2..max_rows).prop_map(|rows| {
        rows.into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect()
    })
}

fn feature_set(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), 8..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inception_score_is_at_least_one(probs in prob_rows(30, 6), splits in 1usize..3) {
        prop_assume!(probs.len() >= 2 * splits);
        let is = inception_score(&probs, splits).unwrap();
        prop_assert!(is >= 1.0 - 1e-12, "{}", is);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self(a in feature_set(4), b in feature_set(4)) {
        let ab = fid(&a, &b).unwrap();
        let ba = fid(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-6 * ab.abs().max(1.0), "{} vs {}", ab, ba);
        prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn top1_never_exceeds_top5(scores in prob_rows(50, 8), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let targets: Vec<usize> = scores.iter().map(|_| rand::Rng::random_range(&mut r, 0..8)).collect();
        let top1 = top_k_accuracy(&scores, &targets, 1).unwrap();
        let top5 = top_k_accuracy(&scores, &targets, 5).unwrap();
        prop_assert!(top1 <= top5);
    }

    #[test]
    fn dipd_ignores_per_channel_affine_maps(
        seed in any::<u64>(),
        scales in prop::collection::vec(0.2f32..5.0, 4),
        shifts in prop::collection::vec(-3.0f32..3.0, 4),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f32>::uniform(&[3, 4, 5, 5], -1.0, 1.0, &mut r);
        let b = Tensor::<f32>::uniform(&[3, 4, 5, 5], -1.0, 1.0, &mut r);
        let mut moved = b.clone();
        for (i, v) in moved.make_mut().iter_mut().enumerate() {
            let c = (i / 25) % 4;
            *v = *v * scales[c] + shifts[c];
        }
        let drift = (dipd(&a, &b).unwrap() - dipd(&a, &moved).unwrap()).abs();
        prop_assert!(drift <= 1e-5, "{}", drift);
    }

    #[test]
    fn ema_gap_decays_geometrically(
        seed in any::<u64>(),
        w in 0.001f64..0.5,
        steps in 1usize..200,
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = ParamStore::<f64>::new();
        g.add("a", Tensor::uniform(&[7], -1.0, 1.0, &mut r));
        g.add("b", Tensor::uniform(&[2, 3], -1.0, 1.0, &mut r));
        let mut ema = g.clone();
        for t in ema.tensors_mut() {
            *t = t.map(|v| v + 0.5);
        }
        for _ in 0..steps {
            ema.lerp_toward(&g, w).unwrap();
        }
        let expect = 0.5 * (1.0 - w).powi(steps as i32);
        for (e, t) in ema.tensors().iter().zip(g.tensors()) {
            for (x, y) in e.data().iter().zip(t.data()) {
                prop_assert!(((x - y) - expect).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn feature_matching_is_invariant_to_class_image_order(seed in any::<u64>(), k in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let fake = Var::constant(Tensor::<f64>::randn(&[3, 4, 2, 2], 1.0, &mut r));
        let class = Tensor::<f64>::randn(&[3 * k, 4, 2, 2], 1.0, &mut r);
        let mut order: Vec<usize> = Vec::new();
        for b in 0..3 {
            let mut group: Vec<usize> = (b * k..(b + 1) * k).collect();
            group.shuffle(&mut r);
            order.extend(group);
        }
        let a = feature_matching_loss(&fake, &Var::constant(class.clone()), k).unwrap().value().item();
        let b = feature_matching_loss(&fake, &Var::constant(class.select0(&order).unwrap()), k).unwrap().value().item();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn class_selection_severs_other_channels(seed in any::<u64>(), classes in prop::collection::vec(0usize..5, 1..6)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let logits = Var::leaf(Tensor::<f64>::randn(&[classes.len(), 5, 3, 3], 1.0, &mut r), true);
        let score = select_class_score(&logits, &classes).unwrap();
        let g = grad(&score.sum(), &[&logits], false).unwrap().remove(0);
        for (i, v) in g.value().data().iter().enumerate() {
            let (b, c) = (i / 45, (i / 9) % 5);
            prop_assert_eq!(*v != 0.0, c == classes[b]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn translation_preserves_spatial_size(downsamples in 1usize..3, factor in 1usize..4, k in 1usize..4, seed in any::<u64>()) {
        let size = factor * (1 << downsamples) * 4;
        let cfg = GeneratorConfig {
            image_size: size,
            downsamples,
            base_channels: 2,
            content_resblocks: 1,
            adain_resblocks: 1,
            class_downsamples: 1,
            class_code_dim: 4,
            mlp_hidden: 8,
            ..GeneratorConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (g, p) = Generator::new::<f32, _>(&cfg, &mut r).unwrap();
        let x = Tensor::<f32>::uniform(&[2, 3, size, size], -1.0, 1.0, &mut r);
        let ys = Tensor::<f32>::uniform(&[2 * k, 3, size, size], -1.0, 1.0, &mut r);
        let out = g.translate_tensor(&p, &x, &ys, k).unwrap();
        prop_assert_eq!(out.shape(), &[2, 3, size, size][..]);
    }

    #[test]
    fn class_image_order_never_changes_translation(seed in any::<u64>(), k in 1usize..6) {
        let cfg = presets::tiny(&DatasetSpec::default()).generator;
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (g, p) = Generator::new::<f32, _>(&cfg, &mut r).unwrap();
        let s = cfg.image_size;
        let x = Tensor::<f32>::uniform(&[3, 3, s, s], -1.0, 1.0, &mut r);
        let ys = Tensor::<f32>::uniform(&[3 * k, 3, s, s], -1.0, 1.0, &mut r);
        let mut order: Vec<usize> = Vec::new();
        for b in 0..3 {
            let mut group: Vec<usize> = (b * k..(b + 1) * k).collect();
            group.shuffle(&mut r);
            order.extend(group);
        }
        let a = g.translate_tensor(&p, &x, &ys, k).unwrap();
        let b = g.translate_tensor(&p, &x, &ys.select0(&order).unwrap(), k).unwrap();
        prop_assert!(a.bits_eq(&b));
    }

    #[test]
    fn few_shot_splits_are_disjoint_and_reproducible(seed in any::<u64>(), val in 1usize..30) {
        let corpus = synthetic_corpus(10, 9, 8, 0).unwrap();
        let targets = corpus.spec.target_labels();
        let a = make_splits(&corpus, &targets, 3, val, seed).unwrap();
        prop_assert_eq!(&a, &make_splits(&corpus, &targets, 3, val, seed).unwrap());
        for s in &a {
            prop_assert!(s.check_disjoint().is_ok());
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), 9 * targets.len());
        }
    }
}
