mod common;

use common::*;
use pairgrpo_core::grpo::{grpo_loss, grpo_loss_and_grad, sft_batch_loss_and_grad, LossConfig, Mode, SftExample};
use pairgrpo_core::policy::{evaluate_sequence, PolicyParams, SamplerSettings};
use pairgrpo_core::world::generate_dataset;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Denominator floor for coordinates whose true derivative is ~0.
const FLOOR: f64 = 1e-5;

fn settings_for(draw: u64) -> SamplerSettings {
    match draw % 3 {
        0 => SamplerSettings {
            temperature: 1.0,
            top_k: 16,
            cfg_scale: 1.0,
        },
        1 => SamplerSettings {
            temperature: 0.8,
            top_k: 16,
            cfg_scale: 2.5,
        },
        _ => SamplerSettings {
            temperature: 1.2,
            top_k: 6,
            cfg_scale: 1.0,
        },
    }
}

#[test]
fn grpo_gradient_matches_central_differences() {
    let world = small_world();
    let vocab = world.vocab().unwrap();
    let data = generate_dataset(7, &world).unwrap();
    let modes = [
        Mode::PairGrpo,
        Mode::NoGroupExpanding,
        Mode::VanillaGrpo,
        Mode::NoGtImage,
    ];
    let mut worst: f64 = 0.0;
    for draw in 0..20u64 {
        let settings = settings_for(draw);
        let old = random_params(tiny_arch(&vocab), draw, 1.0);
        let reference = perturbed(&old, 100 + draw, 0.2);
        let current = perturbed(&old, 200 + draw, 0.1);
        let records = &data[(2 * draw as usize) % 20..][..2];
        let groups = ready_groups(
            modes[draw as usize % 4],
            records,
            &old,
            &reference,
            3,
            1.0,
            &vocab,
            &settings,
            draw,
        );
        let cfg = LossConfig {
            clip_eps: 0.2,
            kl_beta: 0.05,
            gt_in_loss: true,
        };
        let (_, analytic, _) = grpo_loss_and_grad(&groups, &current, &settings, &cfg).unwrap();
        let arch = *current.arch();
        let numeric = fd_gradient(current.theta(), H, |th| {
            let p = PolicyParams::new(arch, th.to_vec()).unwrap();
            grpo_loss(&groups, &p, &settings, &cfg).unwrap().0
        });
        let err = max_rel_err(&analytic, &numeric, FLOOR);
        assert!(err < REL_TOL, "draw {draw}: max relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("grpo worst relative error {worst:e}");
}

#[test]
fn sft_gradient_matches_central_differences() {
    let world = small_world();
    let vocab = world.vocab().unwrap();
    let data = generate_dataset(8, &world).unwrap();
    let mut worst: f64 = 0.0;
    for draw in 0..20u64 {
        let params = random_params(tiny_arch(&vocab), 300 + draw, 1.0);
        let batch: Vec<SftExample> = data[draw as usize % 20..][..4]
            .iter()
            .enumerate()
            .map(|(i, r)| {
                if i == 3 {
                    SftExample::unconditional(&r.grid_2)
                } else {
                    SftExample::new(&r.prompt_1, &r.grid_1)
                }
            })
            .collect();
        let (_, analytic) = sft_batch_loss_and_grad(&params, &batch).unwrap();
        let arch = *params.arch();
        let numeric = fd_gradient(params.theta(), H, |th| {
            let p = PolicyParams::new(arch, th.to_vec()).unwrap();
            sft_batch_loss_and_grad(&p, &batch).unwrap().0
        });
        let err = max_rel_err(&analytic, &numeric, FLOOR);
        assert!(err < REL_TOL, "draw {draw}: max relative error {err:e}");
        worst = worst.max(err);
    }
    eprintln!("sft worst relative error {worst:e}");
}

/// At theta = theta_old with no KL term every ratio is one, so the surrogate
/// gradient reduces to `-(1/K) sum_g (1/N_g) sum_i A_i grad log pi(y_i)`.
#[test]
fn ratio_one_gradient_is_policy_gradient() {
    let world = small_world();
    let vocab = world.vocab().unwrap();
    let data = generate_dataset(9, &world).unwrap();
    for (draw, mode) in [Mode::PairGrpo, Mode::NoGroupExpanding, Mode::VanillaGrpo]
        .into_iter()
        .enumerate()
    {
        let settings = settings_for(draw as u64);
        let params = random_params(tiny_arch(&vocab), 400 + draw as u64, 1.0);
        let groups = ready_groups(mode, &data[..3], &params, &params, 4, 1.0, &vocab, &settings, 5);
        let cfg = LossConfig {
            kl_beta: 0.0,
            ..LossConfig::default()
        };
        let (_, grad, stats) = grpo_loss_and_grad(&groups, &params, &settings, &cfg).unwrap();
        assert!((stats.mean_ratio - 1.0).abs() < 1e-12);
        let mut pg = vec![0.0; grad.len()];
        let k = groups.len() as f64;
        for g in &groups {
            let n: usize = g.members.iter().map(|m| m.grid.tokens().len()).sum();
            for m in &g.members {
                let w = -m.advantage.unwrap() / (n as f64 * k);
                let eval = evaluate_sequence(&params, g.prompt_tokens(m), m.grid.tokens(), &settings).unwrap();
                eval.backward(&params, &vec![w; m.grid.tokens().len()], &mut pg);
            }
        }
        let diff: f64 = grad.iter().zip(&pg).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = pg.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff <= 1e-9 * norm, "{mode}: relative difference {:e}", diff / norm);
    }
}
