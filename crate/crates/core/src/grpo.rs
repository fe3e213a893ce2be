//! Group construction, group-relative advantages and the clipped surrogate
//! objective with a KL penalty to a reference policy.

use std::collections::VecDeque;
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::policy::{
    evaluate_sequence, sample_sequence, sequence_logprob, PolicyParams, PolicySnapshot, SamplerSettings,
};
use crate::reward::RewardScorer;
use crate::rng;
use crate::types::{prompt_codec, PairedRecord, PromptSpec, TokenGrid, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    PairGrpo,
    NoGroupExpanding,
    NoGtImage,
    VanillaGrpo,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::PairGrpo,
        Mode::NoGtImage,
        Mode::NoGroupExpanding,
        Mode::VanillaGrpo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PairGrpo => "pair_grpo",
            Mode::NoGroupExpanding => "no_group_expanding",
            Mode::NoGtImage => "no_gt_image",
            Mode::VanillaGrpo => "vanilla_grpo",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown mode `{s}`")))
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Vanilla,
    Pair,
    PairWithGt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberSource {
    Sampled,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupMember {
    /// Index into [`Group::prompts`].
    pub prompt: usize,
    pub grid: TokenGrid,
    pub logprob_old: Vec<f64>,
    pub logprob_ref: Option<Vec<f64>>,
    pub source: MemberSource,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub prompts: Vec<PromptSpec>,
    pub members: Vec<GroupMember>,
    pub provenance: Provenance,
}

impl Group {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn prompt_tokens(&self, member: &GroupMember) -> &[usize] {
        self.prompts[member.prompt].prompt_tokens()
    }
}

/// Where a group's prompts come from.
#[derive(Debug, Clone, Copy)]
pub enum GroupInput<'a> {
    Pair(&'a PairedRecord),
    Single(&'a PromptSpec),
}

/// Seeds the random streams of one group build.
#[derive(Debug, Clone, Copy)]
pub struct StreamKey {
    pub seed: u64,
    pub iteration: u64,
    pub slot: u64,
}

impl StreamKey {
    fn member(&self, prompt: u64, index: u64) -> rng::StreamRng {
        rng::stream(self.seed, "rollout", &[self.iteration, self.slot, prompt, index])
    }

    fn gt_draw(&self) -> rng::StreamRng {
        rng::stream(self.seed, "gt-draw", &[self.iteration, self.slot])
    }
}

fn sample_members(
    snapshot: &PolicySnapshot,
    prompt: &PromptSpec,
    prompt_index: usize,
    group_size: usize,
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    key: StreamKey,
) -> Result<Vec<GroupMember>> {
    (0..group_size)
        .into_par_iter()
        .map(|i| {
            let mut r = key.member(prompt_index as u64, i as u64);
            let seq = sample_sequence(snapshot, prompt.prompt_tokens(), vocab, settings, &mut r)?;
            Ok(GroupMember {
                prompt: prompt_index,
                grid: seq.grid,
                logprob_old: seq.logprob_old,
                logprob_ref: None,
                source: MemberSource::Sampled,
                reward: None,
                advantage: None,
            })
        })
        .collect()
}

fn ground_truth_member(
    snapshot: &PolicySnapshot,
    prompt: &PromptSpec,
    prompt_index: usize,
    grid: &TokenGrid,
    settings: &SamplerSettings,
) -> Result<GroupMember> {
    let (_, per_token) = sequence_logprob(snapshot.params(), prompt.prompt_tokens(), grid, settings)?;
    Ok(GroupMember {
        prompt: prompt_index,
        grid: grid.clone(),
        logprob_old: per_token,
        logprob_ref: None,
        source: MemberSource::GroundTruth,
        reward: None,
        advantage: None,
    })
}

/// Samples the group(s) for one batch slot.
///
/// `pair_grpo` and `no_gt_image` return one merged group over both prompts,
/// `no_group_expanding` returns one group per prompt and `vanilla_grpo`
/// returns a single-prompt group. In `pair_grpo` one Bernoulli(`p`) draw
/// decides whether the four ground-truth pairings join the group.
#[allow(clippy::too_many_arguments)]
pub fn build_groups(
    mode: Mode,
    input: GroupInput<'_>,
    snapshot_old: &PolicySnapshot,
    group_size: usize,
    p: f64,
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    key: StreamKey,
) -> Result<Vec<Group>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p = {p} outside [0, 1]")));
    }
    if group_size == 0 {
        return Err(Error::EmptyGroup);
    }
    let sample =
        |prompt: &PromptSpec, idx: usize| sample_members(snapshot_old, prompt, idx, group_size, vocab, settings, key);
    match (mode, input) {
        (Mode::VanillaGrpo, GroupInput::Single(prompt)) => Ok(vec![Group {
            prompts: vec![prompt.clone()],
            members: sample(prompt, 0)?,
            provenance: Provenance::Vanilla,
        }]),
        (Mode::VanillaGrpo, GroupInput::Pair(_)) => Err(invalid("vanilla_grpo groups take a single prompt")),
        (_, GroupInput::Single(_)) => Err(invalid(format!("{mode} groups take a prompt pair"))),
        (_, GroupInput::Pair(rec)) => {
            if !rec.verified {
                return Err(Error::Rejected("paired record is not verified".into()));
            }
            let first = sample(&rec.prompt_1, 0)?;
            let second = sample(&rec.prompt_2, 1)?;
            if mode == Mode::NoGroupExpanding {
                return Ok(vec![
                    Group {
                        prompts: vec![rec.prompt_1.clone()],
                        members: first,
                        provenance: Provenance::Vanilla,
                    },
                    Group {
                        prompts: vec![rec.prompt_2.clone()],
                        members: second.into_iter().map(|m| GroupMember { prompt: 0, ..m }).collect(),
                        provenance: Provenance::Vanilla,
                    },
                ]);
            }
            let mut members = first;
            members.extend(second);
            let mut provenance = Provenance::Pair;
            if mode == Mode::PairGrpo && key.gt_draw().gen::<f64>() < p {
                provenance = Provenance::PairWithGt;
                let prompts = [&rec.prompt_1, &rec.prompt_2];
                let grids = [&rec.grid_1, &rec.grid_2];
                for (pi, prompt) in prompts.iter().enumerate() {
                    for grid in grids {
                        members.push(ground_truth_member(snapshot_old, prompt, pi, grid, settings)?);
                    }
                }
            }
            Ok(vec![Group {
                prompts: vec![rec.prompt_1.clone(), rec.prompt_2.clone()],
                members,
                provenance,
            }])
        }
    }
}

/// Scores every member against its own prompt.
pub fn score_group(group: &mut Group, scorer: &dyn RewardScorer, key: StreamKey) -> Result<()> {
    let prompts = &group.prompts;
    let rewards: Vec<f64> = group
        .members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            let k = rng::derive_seed(key.seed, "reward", &[key.iteration, key.slot, i as u64]);
            scorer.score(&prompts[m.prompt], &m.grid, k)
        })
        .collect::<Result<_>>()?;
    for (m, r) in group.members.iter_mut().zip(rewards) {
        m.reward = Some(r);
    }
    Ok(())
}

/// Standardizes rewards over the whole group with the population std.
/// Groups whose std falls below `std_floor` get all-zero advantages.
pub fn compute_advantages(group: &mut Group, std_floor: f64) -> Result<()> {
    if group.members.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let rewards: Vec<f64> = group
        .members
        .iter()
        .map(|m| m.reward.ok_or(Error::Missing("reward")))
        .collect::<Result<_>>()?;
    let advantages = advantages(&rewards, std_floor);
    for (m, a) in group.members.iter_mut().zip(advantages) {
        m.advantage = Some(a);
    }
    Ok(())
}

/// `(R_i - mean) / std` with the degenerate-group fallback.
pub fn advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < std_floor {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

const LOG_RATIO_LIMIT: f64 = 30.0;

/// `r - ln r - 1` with `r = exp(logp_ref - logp_cur)`, plus its derivative
/// with respect to `logp_cur`. The log-ratio is clamped to ±30.
fn kl_with_grad(logp_ref: f64, logp_cur: f64) -> (f64, f64) {
    let x = logp_ref - logp_cur;
    if x.abs() > LOG_RATIO_LIMIT {
        log::warn!("KL log-ratio {x:.3} clamped to ±{LOG_RATIO_LIMIT}");
        let xc = x.clamp(-LOG_RATIO_LIMIT, LOG_RATIO_LIMIT);
        return (xc.exp() - xc - 1.0, 0.0);
    }
    let r = x.exp();
    ((r - x - 1.0).max(0.0), 1.0 - r)
}

pub fn kl_term(logp_ref: f64, logp_cur: f64) -> f64 {
    kl_with_grad(logp_ref, logp_cur).0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Whether ground-truth members contribute loss terms or only group
    /// statistics.
    pub gt_in_loss: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            clip_eps: 0.2,
            kl_beta: 0.01,
            gt_in_loss: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub mean_ratio: f64,
    pub clip_frac: f64,
    pub mean_kl: f64,
    pub tokens: usize,
}

/// Per-token terms of the surrogate for one member: returns
/// `(sum of per-token objective, dObjective/dlogp_cur per token, stats)`.
fn member_terms(
    logp_cur: &[f64],
    logp_old: &[f64],
    logp_ref: &[f64],
    advantage: f64,
    cfg: &LossConfig,
) -> (f64, Vec<f64>, [f64; 3]) {
    let lo = 1.0 - cfg.clip_eps;
    let hi = 1.0 + cfg.clip_eps;
    let mut total = 0.0;
    let mut weights = Vec::with_capacity(logp_cur.len());
    let (mut ratio_sum, mut clipped, mut kl_sum) = (0.0, 0.0, 0.0);
    for j in 0..logp_cur.len() {
        let rho = (logp_cur[j] - logp_old[j]).exp();
        let unclipped = rho * advantage;
        let clipped_term = rho.clamp(lo, hi) * advantage;
        let (surrogate, d_surrogate) = if unclipped <= clipped_term {
            (unclipped, unclipped)
        } else {
            (clipped_term, 0.0)
        };
        let (kl, d_kl) = kl_with_grad(logp_ref[j], logp_cur[j]);
        total += surrogate - cfg.kl_beta * kl;
        weights.push(d_surrogate - cfg.kl_beta * d_kl);
        ratio_sum += rho;
        if rho < lo || rho > hi {
            clipped += 1.0;
        }
        kl_sum += kl;
    }
    (total, weights, [ratio_sum, clipped, kl_sum])
}

/// Attaches per-token log-probabilities under the reference snapshot.
pub fn attach_reference(groups: &mut [Group], reference: &PolicySnapshot, settings: &SamplerSettings) -> Result<()> {
    for g in groups.iter_mut() {
        let prompts = &g.prompts;
        let lps: Vec<Vec<f64>> = g
            .members
            .par_iter()
            .map(|m| {
                sequence_logprob(reference.params(), prompts[m.prompt].prompt_tokens(), &m.grid, settings)
                    .map(|(_, per)| per)
            })
            .collect::<Result<_>>()?;
        for (m, lp) in g.members.iter_mut().zip(lps) {
            m.logprob_ref = Some(lp);
        }
    }
    Ok(())
}

fn counts_in_loss(m: &GroupMember, cfg: &LossConfig) -> bool {
    cfg.gt_in_loss || m.source == MemberSource::Sampled
}

struct GroupOutcome {
    loss: f64,
    grad: Option<Vec<f64>>,
    sums: [f64; 3],
    tokens: usize,
}

fn group_outcome(
    group: &Group,
    params: &PolicyParams,
    settings: &SamplerSettings,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<GroupOutcome> {
    let members: Vec<&GroupMember> = group.members.iter().filter(|m| counts_in_loss(m, cfg)).collect();
    let n_tokens: usize = members.iter().map(|m| m.logprob_old.len()).sum();
    let mut grad = with_grad.then(|| vec![0.0; params.theta().len()]);
    let mut sums = [0.0; 3];
    if n_tokens == 0 {
        return Ok(GroupOutcome {
            loss: 0.0,
            grad,
            sums,
            tokens: 0,
        });
    }
    let scale = 1.0 / n_tokens as f64;
    let mut objective = 0.0;
    for m in members {
        let advantage = m.advantage.ok_or(Error::Missing("advantage"))?;
        let logp_ref = m
            .logprob_ref
            .as_deref()
            .ok_or(Error::Missing("reference log-probabilities"))?;
        let eval = evaluate_sequence(params, group.prompt_tokens(m), m.grid.tokens(), settings)?;
        let (total, weights, s) = member_terms(&eval.per_token, &m.logprob_old, logp_ref, advantage, cfg);
        objective += total;
        for (acc, v) in sums.iter_mut().zip(s) {
            *acc += v;
        }
        if let Some(g) = grad.as_mut() {
            let w: Vec<f64> = weights.iter().map(|w| -w * scale).collect();
            eval.backward(params, &w, g);
        }
    }
    Ok(GroupOutcome {
        loss: -objective * scale,
        grad,
        sums,
        tokens: n_tokens,
    })
}

fn batch_outcome(
    groups: &[Group],
    params: &PolicyParams,
    settings: &SamplerSettings,
    cfg: &LossConfig,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>, LossStats)> {
    if groups.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let outcomes: Vec<GroupOutcome> = groups
        .par_iter()
        .map(|g| group_outcome(g, params, settings, cfg, with_grad))
        .collect::<Result<_>>()?;
    let k = 1.0 / groups.len() as f64;
    let mut loss = 0.0;
    let mut grad = with_grad.then(|| vec![0.0; params.theta().len()]);
    let mut sums = [0.0; 3];
    let mut tokens = 0;
    for o in &outcomes {
        loss += o.loss * k;
        if let (Some(acc), Some(g)) = (grad.as_mut(), o.grad.as_ref()) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b * k;
            }
        }
        for (acc, v) in sums.iter_mut().zip(o.sums) {
            *acc += v;
        }
        tokens += o.tokens;
    }
    let t = tokens.max(1) as f64;
    let stats = LossStats {
        mean_ratio: sums[0] / t,
        clip_frac: sums[1] / t,
        mean_kl: sums[2] / t,
        tokens,
    };
    Ok((loss, grad, stats))
}

/// Clipped surrogate with KL penalty, averaged over groups:
///
/// `L_g = -(1 / sum |y_i|) sum_i sum_j [min(rho A, clip(rho) A) - beta KL]`.
pub fn grpo_loss(
    groups: &[Group],
    params: &PolicyParams,
    settings: &SamplerSettings,
    cfg: &LossConfig,
) -> Result<(f64, LossStats)> {
    let (loss, _, stats) = batch_outcome(groups, params, settings, cfg, false)?;
    Ok((loss, stats))
}

pub fn grpo_loss_and_grad(
    groups: &[Group],
    params: &PolicyParams,
    settings: &SamplerSettings,
    cfg: &LossConfig,
) -> Result<(f64, Vec<f64>, LossStats)> {
    let (loss, grad, stats) = batch_outcome(groups, params, settings, cfg, true)?;
    Ok((loss, grad.expect("gradient requested"), stats))
}

/// Training-time distribution: plain softmax, no truncation or guidance.
pub fn sft_settings(vocab_size: usize) -> SamplerSettings {
    SamplerSettings {
        temperature: 1.0,
        top_k: vocab_size,
        cfg_scale: 1.0,
    }
}

/// Negative mean per-token log-likelihood of `grid` given `prompt`.
pub fn sft_loss(params: &PolicyParams, prompt: &[usize], grid: &TokenGrid) -> Result<f64> {
    let settings = sft_settings(params.arch().vocab_size);
    let (total, per) = sequence_logprob(params, prompt, grid, &settings)?;
    Ok(-total / per.len() as f64)
}

/// One supervised example; `prompt` may be the null prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: Vec<usize>,
    pub grid: TokenGrid,
}

impl SftExample {
    pub fn new(prompt: &PromptSpec, grid: &TokenGrid) -> Self {
        SftExample {
            prompt: prompt.prompt_tokens().to_vec(),
            grid: grid.clone(),
        }
    }

    pub fn unconditional(grid: &TokenGrid) -> Self {
        SftExample {
            prompt: prompt_codec::null_prompt(),
            grid: grid.clone(),
        }
    }
}

/// Mean of [`sft_loss`] over a batch, with its gradient.
pub fn sft_batch_loss_and_grad(params: &PolicyParams, batch: &[SftExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let settings = sft_settings(params.arch().vocab_size);
    let dim = params.theta().len();
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ex| {
            let eval = evaluate_sequence(params, &ex.prompt, ex.grid.tokens(), &settings)?;
            let s = eval.per_token.len() as f64;
            let mut g = vec![0.0; dim];
            eval.backward(params, &vec![-1.0 / s; eval.per_token.len()], &mut g);
            Ok((-eval.total() / s, g))
        })
        .collect::<Result<_>>()?;
    let k = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    for (l, g) in &parts {
        loss += l * k;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b * k;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PScheduleKind {
    Linear,
    Cosine,
    Step,
}

/// Ground-truth injection probability, decaying from 1 at step 0 to 0 at
/// `horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PSchedule {
    pub kind: PScheduleKind,
    pub horizon: u64,
}

impl PSchedule {
    pub fn new(kind: PScheduleKind, horizon: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("p schedule horizon must be positive"));
        }
        Ok(PSchedule { kind, horizon })
    }

    pub fn value(&self, step: u64) -> f64 {
        if step >= self.horizon {
            return 0.0;
        }
        let tau = step as f64 / self.horizon as f64;
        match self.kind {
            PScheduleKind::Linear => 1.0 - tau,
            PScheduleKind::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * tau).cos()),
            PScheduleKind::Step => {
                if tau < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RefreshTrigger {
    Manual,
    Auto { window: usize, drop: f64 },
}

/// Watches the mean-reward stream and reports when the reference policy
/// should be replaced by the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefreshMonitor {
    trigger: RefreshTrigger,
    history: VecDeque<f64>,
    fired: u64,
}

impl RefreshMonitor {
    pub fn new(trigger: RefreshTrigger) -> Result<Self> {
        if let RefreshTrigger::Auto { window, drop } = trigger {
            if window == 0 || !(drop > 0.0) {
                return Err(invalid("auto refresh needs window > 0 and drop > 0"));
            }
        }
        Ok(RefreshMonitor {
            trigger,
            history: VecDeque::new(),
            fired: 0,
        })
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    /// Records one reward value; returns true when a refresh should happen.
    pub fn observe(&mut self, reward: f64) -> bool {
        let RefreshTrigger::Auto { window, drop } = self.trigger else {
            return false;
        };
        self.history.push_back(reward);
        if self.history.len() > 2 * window {
            self.history.pop_front();
        }
        if self.history.len() < 2 * window {
            return false;
        }
        let prev: f64 = self.history.iter().take(window).sum::<f64>() / window as f64;
        let cur: f64 = self.history.iter().skip(window).sum::<f64>() / window as f64;
        if prev - cur >= drop {
            self.history.clear();
            self.fired += 1;
            return true;
        }
        false
    }

    /// Manual trigger.
    pub fn force(&mut self) {
        self.history.clear();
        self.fired += 1;
    }
}

/// Replaces the reference snapshot with the current parameters.
pub fn refresh_reference(params: &PolicyParams) -> PolicySnapshot {
    PolicySnapshot::freeze(params, crate::policy::SnapshotRole::Reference)
}
