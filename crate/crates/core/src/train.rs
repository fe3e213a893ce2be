//! Supervised fine-tuning and the Pair-GRPO training loop, with resumable
//! checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{invalid, Error, Result};
use crate::grpo::{
    attach_reference, build_groups, compute_advantages, grpo_loss_and_grad, score_group, sft_batch_loss_and_grad,
    Group, GroupInput, MemberSource, Mode, PSchedule, RefreshMonitor, SftExample, StreamKey,
};
use crate::optim::{apply_update, LrSchedule, OptState};
use crate::policy::{PolicyParams, PolicySnapshot, SnapshotRole};
use crate::record::{read_records, write_records, RecordType};
use crate::reward::RewardScorer;
use crate::rng;
use crate::types::{PairedRecord, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Fits the policy to the ground-truth grids of `data` by maximum likelihood.
/// Each example's prompt is replaced by the null prompt with probability
/// `cfg_dropout`.
pub fn run_sft(
    params: &mut PolicyParams,
    data: &[PairedRecord],
    config: &RunConfig,
    mut on_step: impl FnMut(&SftMetrics),
) -> Result<Vec<SftMetrics>> {
    if data.is_empty() {
        return Err(invalid("no training records"));
    }
    let pc = &config.policy;
    let schedule = pc.sft_schedule();
    schedule.validate()?;
    let mut opt = OptState::new(params.theta().len(), config.optimizer.adamw())?;
    let mut theta = params.theta().to_vec();
    let mut log = Vec::with_capacity(pc.sft_steps as usize);
    for step in 0..pc.sft_steps {
        let mut r = rng::stream(config.seed, "sft-batch", &[step]);
        let batch: Vec<SftExample> = (0..pc.sft_batch_size)
            .map(|_| {
                let rec = &data[r.gen_range(0..data.len())];
                let (prompt, grid) = if r.gen::<bool>() {
                    (&rec.prompt_1, &rec.grid_1)
                } else {
                    (&rec.prompt_2, &rec.grid_2)
                };
                if r.gen::<f64>() < pc.cfg_dropout {
                    SftExample::unconditional(grid)
                } else {
                    SftExample::new(prompt, grid)
                }
            })
            .collect();
        let (loss, grad) = sft_batch_loss_and_grad(params, &batch)?;
        let lr = schedule.lr_at(step + 1)?;
        apply_update(&mut theta, &grad, &mut opt, lr)?;
        params.set_theta(theta.clone())?;
        let m = SftMetrics { step, loss, lr };
        on_step(&m);
        log.push(m);
    }
    Ok(log)
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iter: u64,
    pub mean_reward: f64,
    pub p: f64,
    pub lr: f64,
    pub clip_frac: f64,
    pub mean_kl: f64,
    pub wall_ms: u64,
    pub mean_ratio: f64,
    pub loss: f64,
    pub group_sizes: Vec<usize>,
    pub refreshed: bool,
}

/// Everything needed to continue a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub mode: Mode,
    pub seed: u64,
    pub iteration: u64,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub opt: OptState,
    pub monitor: RefreshMonitor,
    pub lr_scale: f64,
}

impl TrainState {
    pub fn new(params: PolicyParams, config: &RunConfig) -> Result<Self> {
        Ok(TrainState {
            mode: config.grpo.mode,
            seed: config.seed,
            iteration: 0,
            reference: params.clone(),
            opt: OptState::new(params.theta().len(), config.optimizer.adamw())?,
            monitor: RefreshMonitor::new(config.grpo.refresh)?,
            params,
            lr_scale: 1.0,
        })
    }

    /// Makes the reference policy equal to the current parameters.
    pub fn refresh_reference(&mut self) {
        self.reference = self.params.clone();
        self.monitor.force();
    }
}

/// Checkpoint file contents; the config digest guards resumption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_digest: String,
    pub params_digest: String,
    pub reference_digest: String,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn new(state: &TrainState, config_digest: &str) -> Self {
        Checkpoint {
            config_digest: config_digest.to_string(),
            params_digest: state.params.digest(),
            reference_digest: state.reference.digest(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        write_records(&tmp, RecordType::Checkpoint, std::slice::from_ref(self))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut items: Vec<Checkpoint> = read_records(path, RecordType::Checkpoint)?;
        if items.len() != 1 {
            return Err(Error::Format(format!(
                "{}: expected one checkpoint record",
                path.display()
            )));
        }
        let ck = items.remove(0);
        if ck.params_digest != ck.state.params.digest() || ck.reference_digest != ck.state.reference.digest() {
            return Err(Error::DigestMismatch(format!("{}: parameter digest", path.display())));
        }
        Ok(ck)
    }

    /// Returns the state if the checkpoint was written under `config_digest`.
    pub fn resume(self, config_digest: &str) -> Result<TrainState> {
        if self.config_digest != config_digest {
            return Err(Error::DigestMismatch(format!(
                "checkpoint config {} differs from current {config_digest}",
                self.config_digest
            )));
        }
        Ok(self.state)
    }
}

/// Read-only inputs shared by every training step.
pub struct Trainer<'a> {
    pub config: &'a RunConfig,
    pub vocab: &'a VocabSpec,
    pub data: &'a [PairedRecord],
    pub scorer: &'a dyn RewardScorer,
    pub schedule: LrSchedule,
    pub p_schedule: PSchedule,
    /// Records wall time in metrics; off for byte-identical streams.
    pub record_wall_time: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: &'a RunConfig,
        vocab: &'a VocabSpec,
        data: &'a [PairedRecord],
        scorer: &'a dyn RewardScorer,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(invalid("no training records"));
        }
        if let Some(bad) = data.iter().position(|r| !r.verified) {
            return Err(Error::Rejected(format!("training record {bad} is not verified")));
        }
        let iterations = config.grpo.iterations;
        let schedule = config.optimizer.schedule_for(iterations);
        schedule.validate()?;
        let p_schedule = PSchedule::new(config.grpo.p_schedule, iterations.saturating_sub(1).max(1))?;
        Ok(Trainer {
            config,
            vocab,
            data,
            scorer,
            schedule,
            p_schedule,
            record_wall_time: true,
        })
    }

    fn sample_groups(&self, state: &TrainState, snapshot: &PolicySnapshot, p: f64) -> Result<Vec<Group>> {
        let g = &self.config.grpo;
        let t = state.iteration;
        let mut r = rng::stream(state.seed, "rl-batch", &[t]);
        let mut groups = Vec::new();
        let settings = &self.config.policy.sampler;
        if state.mode == Mode::VanillaGrpo {
            let picks: Vec<&PairedRecord> = self.data.choose_multiple(&mut r, 2 * g.batch_pairs).collect();
            for (slot, rec) in picks.into_iter().enumerate() {
                let prompt = if r.gen::<bool>() { &rec.prompt_1 } else { &rec.prompt_2 };
                let key = StreamKey {
                    seed: state.seed,
                    iteration: t,
                    slot: slot as u64,
                };
                groups.extend(build_groups(
                    state.mode,
                    GroupInput::Single(prompt),
                    snapshot,
                    g.group_size,
                    p,
                    self.vocab,
                    settings,
                    key,
                )?);
            }
        } else {
            let picks: Vec<&PairedRecord> = self.data.choose_multiple(&mut r, g.batch_pairs).collect();
            for (slot, rec) in picks.into_iter().enumerate() {
                let key = StreamKey {
                    seed: state.seed,
                    iteration: t,
                    slot: slot as u64,
                };
                groups.extend(build_groups(
                    state.mode,
                    GroupInput::Pair(rec),
                    snapshot,
                    g.group_size,
                    p,
                    self.vocab,
                    settings,
                    key,
                )?);
            }
        }
        Ok(groups)
    }

    /// Samples, scores and normalizes one batch of groups, then applies one
    /// optimizer update on the clipped surrogate.
    pub fn step(&self, state: &mut TrainState) -> Result<StepMetrics> {
        let start = Instant::now();
        let g = &self.config.grpo;
        let t = state.iteration;
        let p = self.p_schedule.value(t);
        let old = PolicySnapshot::freeze(&state.params, SnapshotRole::Old);
        let reference = PolicySnapshot::freeze(&state.reference, SnapshotRole::Reference);
        let settings = &self.config.policy.sampler;
        let mut groups = self.sample_groups(state, &old, p)?;
        for (slot, group) in groups.iter_mut().enumerate() {
            let key = StreamKey {
                seed: state.seed,
                iteration: t,
                slot: slot as u64,
            };
            score_group(group, self.scorer, key)?;
            compute_advantages(group, g.std_floor)?;
        }
        attach_reference(&mut groups, &reference, settings)?;
        let (loss, grad, stats) = grpo_loss_and_grad(&groups, &state.params, settings, &g.loss())?;
        let lr = self.schedule.lr_at((t + 1).min(self.schedule.total_steps))? * state.lr_scale;
        let mut theta = state.params.theta().to_vec();
        apply_update(&mut theta, &grad, &mut state.opt, lr)?;
        state.params.set_theta(theta)?;

        let sampled: Vec<f64> = groups
            .iter()
            .flat_map(|gr| gr.members.iter())
            .filter(|m| m.source == MemberSource::Sampled)
            .filter_map(|m| m.reward)
            .collect();
        let mean_reward = sampled.iter().sum::<f64>() / sampled.len().max(1) as f64;
        let refreshed = state.monitor.observe(mean_reward);
        if refreshed {
            log::info!("iteration {t}: reward declined, refreshing reference policy");
            state.reference = state.params.clone();
        }
        state.iteration += 1;
        Ok(StepMetrics {
            iter: t,
            mean_reward,
            p,
            lr,
            clip_frac: stats.clip_frac,
            mean_kl: stats.mean_kl,
            wall_ms: if self.record_wall_time {
                start.elapsed().as_millis() as u64
            } else {
                0
            },
            mean_ratio: stats.mean_ratio,
            loss,
            group_sizes: groups.iter().map(Group::len).collect(),
            refreshed,
        })
    }

    pub fn finished(&self, state: &TrainState) -> bool {
        state.iteration >= self.config.grpo.iterations
    }
}
