mod common;

use kgqa_core::grpo::GrpoConfig;
use kgqa_core::toy::{
    feature_dim, generate_world, read_curves, train_toy, SoftmaxTemplatePolicy, Template,
    ToyTrainConfig, N_TEMPLATES,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn short(steps: usize) -> ToyTrainConfig {
    ToyTrainConfig {
        steps,
        ..ToyTrainConfig::default()
    }
}

#[test]
fn world_is_consistent() {
    let w = generate_world(7, 40, 64);
    w.verify().unwrap();
    assert_eq!(w.tasks.len(), 64);
    assert!(w.tasks.iter().any(|t| t.hops == 2));
}

#[test]
fn training_is_deterministic_across_worker_counts() {
    let cfg = short(12);
    let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
    let a = train_toy(
        &world,
        &ToyTrainConfig {
            workers: 1,
            ..cfg.clone()
        },
    );
    let b = train_toy(&world, &ToyTrainConfig { workers: 4, ..cfg });
    assert_eq!(a.policy.theta, b.policy.theta);
    assert_eq!(format!("{:?}", a.curves), format!("{:?}", b.curves));
}

#[test]
fn matches_golden_curve() {
    let cfg = short(30);
    let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
    let got = train_toy(&world, &cfg).curves;
    let file = std::fs::File::open(common::fixture("toy_curves_30.csv")).unwrap();
    let want = read_curves(file).unwrap();
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert_eq!(g.step, w.step);
        for (x, y) in [
            (g.mean_reward, w.mean_reward),
            (g.in_batch_accuracy, w.in_batch_accuracy),
            (g.executability, w.executability),
            (g.mean_turns, w.mean_turns),
            (g.p_malformed, w.p_malformed),
        ] {
            assert!((x - y).abs() <= 1e-9, "step {}: {x} vs {y}", g.step);
        }
    }
}

#[test]
fn constant_reward_leaves_policy_unchanged() {
    let cfg = ToyTrainConfig {
        constant_reward: Some(0.7),
        ..short(10)
    };
    let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
    let out = train_toy(&world, &cfg);
    let start = SoftmaxTemplatePolicy::with_query_prior(cfg.t_max, cfg.prior_query_bias);
    assert_eq!(out.policy.theta, start.theta);
}

#[test]
fn learns_without_std_normalization() {
    let cfg = ToyTrainConfig {
        grpo: GrpoConfig {
            normalize_by_std: false,
            ..ToyTrainConfig::default().grpo
        },
        ..ToyTrainConfig::default()
    };
    let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
    let s = train_toy(&world, &cfg).summary;
    assert!(
        s.final_window_reward - s.first_window_reward >= 0.3,
        "{s:?}"
    );
    assert!(s.final_p_malformed < 0.05, "{s:?}");
}

#[test]
fn zero_policy_samples_templates_uniformly() {
    let policy = SoftmaxTemplatePolicy::zeros(10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 60_000;
    let mut counts = [0usize; N_TEMPLATES];
    for _ in 0..n {
        let phi: Vec<f64> = (0..feature_dim(10))
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        counts[policy.sample(&phi, &mut rng).index()] += 1;
    }
    let expected = n as f64 / N_TEMPLATES as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((N_TEMPLATES - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "counts {counts:?}, chi2 {chi2}, p {p}");
    assert_eq!(Template::ALL.len(), N_TEMPLATES);
}

#[test]
fn greedy_sampling_is_argmax() {
    let mut policy = SoftmaxTemplatePolicy::with_query_prior(10, 2.0);
    policy.temperature = 0.0;
    let phi = vec![1.0; feature_dim(10)];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let first = policy.sample(&phi, &mut rng);
    assert!(first.is_query());
    for _ in 0..20 {
        assert_eq!(policy.sample(&phi, &mut rng), first);
    }
}
