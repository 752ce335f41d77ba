//! Randomised invariants across modules.

use std::collections::BTreeSet;

use pflm_core::config::ExperimentConfig;
use pflm_core::data::{partition_dirichlet, Vocabulary};
use pflm_core::federation::{aggregate_round, Normalization};
use pflm_core::model::{
    forward, lora_wrap, nce_loss_and_grad, nce_probabilities, softmax_eval, Example, Minibatch, ModelConfig,
    ModelDelta, ModelParams,
};
use pflm_core::payload::{payload_size_bytes, Weighting, WordSampler};
use pflm_core::privacy::{calibrate_sigma, default_orders, epsilon_for, gaussian_noise_sum, PrivacyParams};
use pflm_core::rng::stream;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn toy(v: usize, d: usize, hidden: Vec<usize>, k: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        embed_dim: d,
        fofe_order: 2,
        hidden_widths: hidden,
        nce_noise_k: k,
        embed_init: 0.3,
        ..ModelConfig::large_vocab()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nce_probabilities_sum_to_one(score in -40.0f64..40.0, k in 1usize..2048, p in 1e-9f64..1.0) {
        let (p0, p1) = nce_probabilities(score, k, p).unwrap();
        prop_assert!((p0 + p1 - 1.0).abs() <= 1e-15);
        prop_assert!((0.0..=1.0).contains(&p0) && (0.0..=1.0).contains(&p1));
    }

    #[test]
    fn lora_wrapping_preserves_outputs(seed in 0u64..10_000, d in 3usize..7, r in 1usize..3) {
        let cfg = toy(9, d, vec![d + 1, d + 2], 3);
        let base = ModelParams::init(&cfg, &mut stream(seed, &[0])).unwrap();
        let wrapped = lora_wrap(&base, r, &mut stream(seed, &[1])).unwrap();
        let mut rng = stream(seed, &[2]);
        let x: Vec<f64> = (0..cfg.input_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        prop_assert_eq!(forward(&base, &x).unwrap(), forward(&wrapped, &x).unwrap());
        let data = vec![Example { history: vec![0, 0, 4, 7], target: 3 }, Example { history: vec![0, 0], target: 8 }];
        prop_assert_eq!(
            softmax_eval(&base, &data).unwrap().to_bits(),
            softmax_eval(&wrapped, &data).unwrap().to_bits()
        );
    }

    #[test]
    fn nce_gradient_touches_only_batch_words(seed in 0u64..10_000, untied in any::<bool>()) {
        let mut cfg = toy(20, 4, vec![6], 3);
        cfg.tie_embeddings = !untied;
        let params = ModelParams::init(&cfg, &mut stream(seed, &[0])).unwrap();
        let mut rng = stream(seed, &[1]);
        let mut batch = Minibatch::default();
        let mut used = BTreeSet::new();
        for _ in 0..rng.random_range(1..4) {
            let ctx: Vec<u32> = (0..rng.random_range(2..5)).map(|_| rng.random_range(0..20)).collect();
            let target = rng.random_range(0..20);
            let noise: Vec<u32> = (0..3).map(|_| rng.random_range(0..20)).collect();
            used.extend(ctx.iter().chain(&noise).copied());
            used.insert(target);
            batch.contexts.push(ctx);
            batch.targets.push(target);
            batch.noise.push(noise);
        }
        let p_uni = vec![0.05; 20];
        let grads = nce_loss_and_grad(&params, &batch, &p_uni).unwrap().grads;
        let touched: BTreeSet<u32> = grads.rows.keys().copied().collect();
        prop_assert!(touched.is_subset(&used));
    }

    #[test]
    fn payload_grows_with_m_and_r(m1 in 1usize..50_000, dm in 1usize..50_000, r in 1usize..200) {
        let cfg = ModelConfig::large_vocab();
        let a = payload_size_bytes(&cfg, Some(m1), None).unwrap();
        let b = payload_size_bytes(&cfg, Some(m1 + dm), None).unwrap();
        prop_assert!(b.total() > a.total());
        prop_assert_eq!(b.scalars - a.scalars, (dm * cfg.embed_dim * 4) as u64);
        let lr = payload_size_bytes(&cfg, None, Some(r)).unwrap();
        let lr1 = payload_size_bytes(&cfg, None, Some(r + 1)).unwrap();
        prop_assert!(lr1.total() > lr.total());
    }

    #[test]
    fn unsampled_rows_get_no_noise(seed in 0u64..100_000, m in 1usize..8, sigma in 0.1f64..5.0) {
        let weights: Vec<f64> = (1..=10).map(|i| 1.0 / i as f64).collect();
        let sampler = WordSampler::new(&weights, 1.0, m, Weighting::ApproxQ).unwrap();
        let mut rng = stream(seed, &[]);
        let words = sampler.sample(&mut rng).unwrap();
        let template = ModelDelta::zeros(10, 2, 3);
        let mut d = template.clone();
        d.rows.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
        let privacy = PrivacyParams {
            epsilon: 1.0, delta: 1e-6, sampling_rate: 0.5, rounds: 1, clip_radius: 0.3,
            noise_sigma: sigma, rdp_orders: default_orders(),
        };
        let out = aggregate_round(&[d], &words, Some(&sampler), &privacy, 4, Normalization::ExpectedCohort, &template, &mut rng).unwrap();
        for (w, row) in out.rows.outer_iter().enumerate() {
            if !words.contains(&(w as u32)) {
                prop_assert!(row.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn noise_is_a_function_of_the_seed(seed in any::<u64>(), n in 1usize..300) {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        gaussian_noise_sum(&mut a, 1.0, 0.3, &mut stream(seed, &[5])).unwrap();
        gaussian_noise_sum(&mut b, 1.0, 0.3, &mut stream(seed, &[5])).unwrap();
        prop_assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn epsilon_is_monotone(q in 1e-4f64..0.5, dq in 1e-4f64..0.3, sigma in 0.6f64..5.0, ds in 0.01f64..2.0, t in 1usize..3000, dt in 1usize..3000) {
        let orders = default_orders();
        let e = |q, s, t| epsilon_for(q, s, t, 1e-6, &orders).unwrap().0;
        let base = e(q, sigma, t);
        prop_assert!(e((q + dq).min(1.0), sigma, t) >= base);
        prop_assert!(e(q, sigma, t + dt) >= base);
        prop_assert!(e(q, sigma + ds, t) <= base);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn calibration_never_overshoots(eps in 0.5f64..8.0, q in 1e-3f64..0.3, t in 10usize..3000) {
        let orders = default_orders();
        let c = calibrate_sigma(eps, 1e-6, q, t, &orders).unwrap();
        let (back, _) = epsilon_for(q, c.sigma, t, 1e-6, &orders).unwrap();
        prop_assert!(back <= eps && back >= 0.999 * eps, "{} vs {}", back, eps);
    }

    #[test]
    fn dirichlet_partition_covers_exactly(seed in 0u64..10_000, extra in 0usize..300, clients in 1usize..20, conc in 0.01f64..50.0) {
        let n = clients + extra;
        let mut rng = stream(seed, &[]);
        let sentences: Vec<(Vec<u32>, usize)> = (0..n)
            .map(|i| (vec![i as u32, rng.random_range(0..50)], rng.random_range(0..5)))
            .collect();
        let users = partition_dirichlet(sentences.clone(), clients, conc, &mut rng).unwrap();
        prop_assert_eq!(users.len(), clients);
        let mut got: Vec<(Vec<u32>, usize)> = users
            .iter()
            .flat_map(|u| u.sentences.iter().cloned().zip(u.labels.iter().copied()))
            .collect();
        let mut want = sentences;
        got.sort();
        want.sort();
        prop_assert_eq!(got, want);
        let few = vec![(vec![0u32], 0usize); clients - 1];
        prop_assert!(partition_dirichlet(few, clients, conc, &mut rng).is_err());
    }

    #[test]
    fn vocabulary_ignores_token_order(seed in 0u64..10_000, size in 3usize..40) {
        let mut rng = stream(seed, &[]);
        let mut tokens: Vec<String> = (0..400).map(|_| format!("t{}", rng.random_range(0..30) * rng.random_range(0..3))).collect();
        let a = Vocabulary::build(tokens.iter().map(String::as_str), size).unwrap();
        tokens.shuffle(&mut rng);
        let b = Vocabulary::build(tokens.iter().map(String::as_str), size).unwrap();
        prop_assert_eq!(a.words(), b.words());
        prop_assert_eq!(a.counts(), b.counts());
        prop_assert!(a.p_uni().iter().all(|&p| p > 0.0));
        prop_assert!((a.p_uni().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_text_round_trips(peu in 1usize..100_000, lr in 1e-4f64..1.0, rounds in 1usize..10_000, gamma in 0.0f64..1.0, seed in any::<u64>()) {
        let mut cfg = ExperimentConfig::default();
        cfg.set("peu_m", &peu.to_string()).unwrap();
        cfg.set("local_lr", &lr.to_string()).unwrap();
        cfg.set("rounds", &rounds.to_string()).unwrap();
        cfg.set("ema_gamma", &gamma.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        let mut back = ExperimentConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
