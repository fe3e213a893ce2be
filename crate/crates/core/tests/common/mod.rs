//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use pairgrpo_core::grpo::{
    attach_reference, build_groups, compute_advantages, score_group, Group, GroupInput, Mode, StreamKey,
};
use pairgrpo_core::policy::{Architecture, PolicyParams, PolicySnapshot, SamplerSettings, SnapshotRole};
use pairgrpo_core::reward::OracleReward;
use pairgrpo_core::rng;
use pairgrpo_core::types::{Category, PairedRecord, PromptSpec, RelationKind, TokenDef, TokenGrid, VocabSpec};
use pairgrpo_core::world::WorldConfig;

/// Cells of `grid` holding the object token for `(shape, color)`, found by
/// decoding every cell rather than looking the token id up.
fn cells(
    grid: &TokenGrid,
    vocab: &VocabSpec,
    shape: pairgrpo_core::types::Shape,
    color: pairgrpo_core::types::Color,
) -> Vec<(usize, usize)> {
    let w = vocab.grid_width();
    grid.tokens()
        .iter()
        .enumerate()
        .filter(|(_, &t)| vocab.token_def(t) == Some(TokenDef::Object { shape, color }))
        .map(|(i, _)| (i / w, i % w))
        .collect()
}

/// Second implementation of the question-based reward, written from the
/// scoring rules alone.
pub fn oracle_reward(spec: &PromptSpec, grid: &TokenGrid, vocab: &VocabSpec) -> f64 {
    let mut scores = Vec::new();
    for o in spec.objects() {
        let shape_present = grid
            .tokens()
            .iter()
            .any(|&t| matches!(vocab.token_def(t), Some(TokenDef::Object { shape, .. }) if shape == o.shape));
        scores.push(if shape_present { 1.0 } else { 0.0 });
        let n = cells(grid, vocab, o.shape, o.color).len() as f64;
        if o.count == 1 {
            scores.push(if n == 1.0 { 1.0 } else { 0.0 });
        } else {
            let want = f64::from(o.count);
            scores.push((1.0 - (n - want).abs() / want).max(0.0));
        }
    }
    for r in spec.relations() {
        let (a, b) = (spec.objects()[r.subject], spec.objects()[r.object]);
        let sa = cells(grid, vocab, a.shape, a.color);
        let sb = cells(grid, vocab, b.shape, b.color);
        let s = if sa.is_empty() || sb.is_empty() {
            0.0
        } else if sa.len() > a.count as usize || sb.len() > b.count as usize {
            0.5
        } else {
            let ok = sa.iter().all(|&(r1, c1)| {
                sb.iter().all(|&(r2, c2)| match r.kind {
                    RelationKind::LeftOf => c1 < c2,
                    RelationKind::RightOf => c1 > c2,
                    RelationKind::Above => r1 < r2,
                    RelationKind::Below => r1 > r2,
                })
            });
            if ok {
                1.0
            } else {
                0.0
            }
        };
        scores.push(s);
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

/// Same template, with every difference confined to the fields the
/// category is allowed to change, and at least one difference.
pub fn same_template(a: &PromptSpec, b: &PromptSpec, category: Category) -> bool {
    if a.objects().len() != b.objects().len() || a.relations().len() != b.relations().len() {
        return false;
    }
    let mut diffs = 0;
    for (x, y) in a.objects().iter().zip(b.objects()) {
        let d = [x.shape != y.shape, x.color != y.color, x.count != y.count];
        // [shape, color, count]
        let allowed = match category {
            Category::OverallAppearance => [true, false, false],
            Category::Color => [false, true, false],
            Category::Counting => [false, false, true],
            Category::Position => [false; 3],
        };
        for (changed, ok) in d.iter().zip(allowed) {
            if *changed && !ok {
                return false;
            }
            diffs += usize::from(*changed);
        }
    }
    for (x, y) in a.relations().iter().zip(b.relations()) {
        if x.subject != y.subject || x.object != y.object {
            return false;
        }
        if x.kind != y.kind {
            if category != Category::Position {
                return false;
            }
            diffs += 1;
        }
    }
    diffs > 0
}

/// The three post-verification conditions, recomputed with [`oracle_reward`].
pub fn oracle_verifies(rec: &PairedRecord, vocab: &VocabSpec, theta_pos: f64, theta_neg: f64) -> bool {
    let r = |p: &PromptSpec, g: &TokenGrid| oracle_reward(p, g, vocab);
    same_template(&rec.prompt_1, &rec.prompt_2, rec.category)
        && r(&rec.prompt_1, &rec.grid_1) >= theta_pos
        && r(&rec.prompt_2, &rec.grid_2) >= theta_pos
        && r(&rec.prompt_1, &rec.grid_2) <= theta_neg
        && r(&rec.prompt_2, &rec.grid_1) <= theta_neg
}

/// Central differences over every coordinate.
pub fn fd_gradient(theta: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            x[i] = theta[i] + h;
            let up = f(&x);
            x[i] = theta[i] - h;
            let down = f(&x);
            x[i] = theta[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over coordinates.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn small_world() -> WorldConfig {
    WorldConfig {
        pairs: 24,
        ..WorldConfig::default()
    }
}

/// A narrow policy so full finite-difference sweeps stay cheap.
pub fn tiny_arch(vocab: &VocabSpec) -> Architecture {
    Architecture::for_vocab(vocab, 3, 3, 5)
}

pub fn random_params(arch: Architecture, seed: u64, scale: f64) -> PolicyParams {
    PolicyParams::init(arch, scale, &mut rng::stream(seed, "test-init", &[])).unwrap()
}

/// `theta + noise` with the same architecture.
pub fn perturbed(params: &PolicyParams, seed: u64, scale: f64) -> PolicyParams {
    use rand::Rng;
    let mut r = rng::stream(seed, "test-perturb", &[]);
    let theta = params
        .theta()
        .iter()
        .map(|x| x + scale * r.gen_range(-1.0..1.0))
        .collect();
    PolicyParams::new(*params.arch(), theta).unwrap()
}

/// Scored, normalized groups with reference log-probs attached.
#[allow(clippy::too_many_arguments)]
pub fn ready_groups(
    mode: Mode,
    records: &[PairedRecord],
    old: &PolicyParams,
    reference: &PolicyParams,
    group_size: usize,
    p: f64,
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    seed: u64,
) -> Vec<Group> {
    let snap = PolicySnapshot::freeze(old, SnapshotRole::Old);
    let scorer = OracleReward::new(vocab.clone());
    let mut groups = Vec::new();
    for (slot, rec) in records.iter().enumerate() {
        let key = StreamKey {
            seed,
            iteration: 0,
            slot: slot as u64,
        };
        let input = if mode == Mode::VanillaGrpo {
            GroupInput::Single(&rec.prompt_1)
        } else {
            GroupInput::Pair(rec)
        };
        for mut g in build_groups(mode, input, &snap, group_size, p, vocab, settings, key).unwrap() {
            score_group(&mut g, &scorer, key).unwrap();
            compute_advantages(&mut g, 1e-6).unwrap();
            groups.push(g);
        }
    }
    attach_reference(
        &mut groups,
        &PolicySnapshot::freeze(reference, SnapshotRole::Reference),
        settings,
    )
    .unwrap();
    groups
}
