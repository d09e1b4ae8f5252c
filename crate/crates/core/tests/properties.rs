use conceptlab::data::{decode_dataset, encode_dataset, make_preset, preset};
use conceptlab::erasure::{ema_update, neg_prompt_guidance, sega_guidance, sld_guidance};
use conceptlab::eval::{erased_fraction, frechet_distance, prototype_score, PrototypeScorer};
use conceptlab::model::checkpoint::Checkpoint;
use conceptlab::model::{ArchitectureConfig, ConceptVocabulary, ModelParams};
use conceptlab::schedule::{cfg_combine, timestep_grid, ScheduleConfig};
use conceptlab::RngStream;
use ndarray::Array2;
use proptest::prelude::*;

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn samples(seed: u64, n: usize, scale: f64, shift: f64) -> Array2<f64> {
    let mut rng = RngStream::new(seed, 3);
    Array2::from_shape_fn((n, 2), |_| shift + scale * rng.normal())
}

proptest! {
    #[test]
    fn cfg_is_symmetric_under_swap((u, c) in (1usize..6).prop_flat_map(|n| (vec_of(n), vec_of(n))), s in -8.0f64..8.0) {
        let a = cfg_combine(&u, &c, s).unwrap();
        let b = cfg_combine(&c, &u, 1.0 - s).unwrap();
        prop_assert!(close(&a, &b, 1e-12));
    }

    #[test]
    fn negative_prompt_of_equal_estimates_is_identity(e in vec_of(5), s in -8.0f64..8.0) {
        prop_assert!(close(&neg_prompt_guidance(&e, &e, s).unwrap(), &e, 1e-12));
    }

    #[test]
    fn safety_terms_vanish_when_target_matches_unconditional(
        (u, c) in (1usize..8).prop_flat_map(|n| (vec_of(n), vec_of(n))),
        s_g in 0.0f64..10.0,
        s_s in 0.0f64..5.0,
        lam_sld in 0.0f64..5.0,
        lam_sega in 1.0f64..100.0,
    ) {
        let plain = cfg_combine(&u, &c, s_g).unwrap();
        prop_assert!(close(&sld_guidance(&u, &c, &u, s_g, s_s, lam_sld).unwrap(), &plain, 1e-12));
        prop_assert!(close(&sega_guidance(&u, &c, &u, s_g, s_s, lam_sega).unwrap(), &plain, 1e-12));
    }

    #[test]
    fn ema_stays_between_teacher_and_student(seed in 0u64..1000, m in 0.0f64..=1.0) {
        let arch = ArchitectureConfig { hidden: 4, n_hidden: 1, embed_dim: 3, time_dim: 2, ..Default::default() };
        let mut rng = RngStream::new(seed, 0);
        let a = ModelParams::from_values(arch, rng.normal_vec(arch.param_count())).unwrap();
        let b = ModelParams::from_values(arch, rng.normal_vec(arch.param_count())).unwrap();
        let e = ema_update(&a, &b, m).unwrap();
        for ((x, y), z) in a.values().iter().zip(b.values()).zip(e.values()) {
            prop_assert!(*z >= x.min(*y) - 1e-15 && *z <= x.max(*y) + 1e-15);
        }
    }

    #[test]
    fn frechet_is_symmetric(seed in 0u64..500, scale in 0.1f64..3.0, shift in -5.0f64..5.0) {
        let a = samples(seed, 50, 1.0, 0.0);
        let b = samples(seed + 1, 60, scale, shift);
        let ab = frechet_distance(a.view(), b.view()).unwrap();
        let ba = frechet_distance(b.view(), a.view()).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert!(frechet_distance(a.view(), a.view()).unwrap().abs() < 1e-10);
    }

    #[test]
    fn erased_fraction_never_grows_with_threshold(seed in 0u64..500, mut th in prop::collection::vec(0.0f64..=1.0, 2..8)) {
        let mix = preset("overlap").unwrap();
        let x = samples(seed, 80, 2.0, 0.0);
        th.sort_by(f64::total_cmp);
        let fr: Vec<f64> = th.iter().map(|&t| erased_fraction(x.view(), &mix, 1, t).unwrap()).collect();
        prop_assert!(fr.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(fr.iter().all(|f| (0.0..=1.0).contains(f)));
    }

    #[test]
    fn prototype_score_is_a_probability(x in vec_of(2), cp in vec_of(2), cm in vec_of(2), tau in 0.3f64..5.0) {
        prop_assume!(cp != cm);
        let s = PrototypeScorer::new(cp.clone(), cm.clone(), tau, 0.5).unwrap();
        let v = prototype_score(&s, &x).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        // reflect x onto the bisector
        let mid: Vec<f64> = cp.iter().zip(&cm).map(|(a, b)| 0.5 * (a + b)).collect();
        let dir: Vec<f64> = cm.iter().zip(&cp).map(|(a, b)| a - b).collect();
        let norm2: f64 = dir.iter().map(|d| d * d).sum();
        let along: f64 = x.iter().zip(&mid).zip(&dir).map(|((x, m), d)| (x - m) * d).sum::<f64>() / norm2;
        let on: Vec<f64> = x.iter().zip(&dir).map(|(x, d)| x - along * d).collect();
        prop_assert!((prototype_score(&s, &on).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn posteriors_are_normalized(x in vec_of(2), name in prop::sample::select(vec!["four-corners", "rings", "overlap"])) {
        let mix = preset(name).unwrap();
        let p = mix.bayes_posterior(&x).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn grids_are_strictly_increasing(total in 1usize..400, frac in 0.0f64..1.0) {
        let n = 1 + ((total - 1) as f64 * frac) as usize;
        let g = timestep_grid(total, n).unwrap();
        prop_assert_eq!(g.len(), n + 1);
        prop_assert_eq!(g[0], 0);
        prop_assert_eq!(g[n], total);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn dataset_bytes_round_trip(seed in 0u64..10_000, n in 1usize..300) {
        let (_, d) = make_preset("rings", seed, n).unwrap();
        let bytes = encode_dataset(&d);
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(encode_dataset(&back), bytes);
        prop_assert_eq!(back, d);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in 0u64..10_000) {
        let arch = ArchitectureConfig { hidden: 6, n_hidden: 2, embed_dim: 5, time_dim: 4, ..Default::default() };
        let mut rng = RngStream::new(seed, 0);
        let values = rng.normal_vec(arch.param_count()).into_iter().map(|v| v as f32 as f64).collect();
        let params = ModelParams::from_values(arch, values).unwrap();
        let vocab = ConceptVocabulary::new(vec!["a".into(), "b".into()], 5, seed).unwrap();
        let ck = Checkpoint::new(params, vocab, ScheduleConfig::default());
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(back.params, ck.params);
    }
}
