mod common;

use std::collections::HashSet;
use std::time::{Duration, Instant};

use common::{oracle_reward, oracle_verifies, same_template};
use pairgrpo_core::rng;
use pairgrpo_core::types::Category;
use pairgrpo_core::world::{
    build_eval_suite, generate_dataset, pair_key, render_ground_truth, verify_pair, SceneSampler, WorldConfig,
};

#[test]
fn five_thousand_records_pass_independent_verification() {
    let world = WorldConfig::default();
    assert_eq!(world.pairs, 5_000);
    let vocab = world.vocab().unwrap();
    let start = Instant::now();
    let data = generate_dataset(11, &world).unwrap();
    let bad: Vec<usize> = data
        .iter()
        .enumerate()
        .filter(|(_, r)| !(r.verified && oracle_verifies(r, &vocab, world.theta_pos, world.theta_neg)))
        .map(|(i, _)| i)
        .collect();
    let elapsed = start.elapsed();
    assert_eq!(data.len(), 5_000);
    assert!(
        bad.is_empty(),
        "{} records fail, first {:?}",
        bad.len(),
        &bad[..bad.len().min(5)]
    );
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    for cat in Category::ALL {
        assert!(data.iter().filter(|r| r.category == cat).count() > 1000);
    }
}

#[test]
fn rendered_ground_truth_scores_one() {
    let world = WorldConfig::default();
    let vocab = world.vocab().unwrap();
    let sampler = SceneSampler::new(&vocab, &world).unwrap();
    for i in 0..500 {
        let mut r = rng::stream(3, "test-render", &[i]);
        let cat = sampler.sample_category(&mut r);
        let spec = sampler.sample_base(cat, &mut r).unwrap();
        let grid = render_ground_truth(&spec, &vocab, &mut r).unwrap();
        assert_eq!(oracle_reward(&spec, &grid, &vocab), 1.0, "{}", spec.surface_text());
    }
}

#[test]
fn verification_rejects_copied_grid_and_foreign_template() {
    let world = WorldConfig {
        pairs: 50,
        ..WorldConfig::default()
    };
    let vocab = world.vocab().unwrap();
    let data = generate_dataset(12, &world).unwrap();
    let mut copied = data[0].clone();
    copied.grid_2 = copied.grid_1.clone();
    assert!(!verify_pair(&mut copied, &vocab, 0.99, 0.8));
    let other = data
        .iter()
        .find(|r| r.prompt_1.skeleton() != data[0].prompt_1.skeleton())
        .unwrap();
    let mut foreign = data[0].clone();
    foreign.prompt_2 = other.prompt_1.clone();
    foreign.grid_2 = other.grid_1.clone();
    assert!(!verify_pair(&mut foreign, &vocab, 0.99, 0.8));
    assert!(!oracle_verifies(&foreign, &vocab, 0.99, 0.8));
}

#[test]
fn eval_suite_is_held_out_and_well_formed() {
    let world = WorldConfig::default();
    let suite = build_eval_suite(50, 1000, &world).unwrap();
    assert_eq!(suite.cases.len(), 200);
    for cat in Category::ALL {
        assert_eq!(suite.by_category(cat).count(), 50);
    }
    for c in &suite.cases {
        assert!(same_template(&c.prompt_1, &c.prompt_2, c.category), "case {}", c.id);
    }
    let data = generate_dataset(0, &world).unwrap();
    let train: HashSet<String> = data.iter().map(|r| pair_key(&r.prompt_1, &r.prompt_2)).collect();
    let overlap = suite
        .cases
        .iter()
        .filter(|c| train.contains(&pair_key(&c.prompt_1, &c.prompt_2)))
        .count();
    assert!((overlap as f64) < 0.05 * suite.cases.len() as f64, "overlap {overlap}");
}

#[test]
fn generation_is_a_pure_function_of_seed() {
    let world = WorldConfig {
        pairs: 300,
        ..WorldConfig::default()
    };
    let a = serde_json::to_string(&generate_dataset(5, &world).unwrap()).unwrap();
    let b = serde_json::to_string(&generate_dataset(5, &world).unwrap()).unwrap();
    let c = serde_json::to_string(&generate_dataset(6, &world).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
