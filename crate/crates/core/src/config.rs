//! Run configuration: one TOML document with sections `world`, `reward`,
//! `policy`, `grpo`, `optimizer` and `eval`.
//!
//! Layers are applied in order defaults < file < environment < command line.
//! Environment overrides use `PREFIX__SECTION__KEY=value`; command-line
//! overrides use dotted keys such as `grpo.group_size=7`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grpo::{LossConfig, Mode, PScheduleKind, RefreshTrigger};
use crate::optim::{AdamWConfig, LrKind, LrSchedule};
use crate::policy::{Architecture, SamplerSettings};
use crate::record::sha256_hex;
use crate::reward::RemoteSettings;
use crate::types::VocabSpec;
use crate::world::WorldConfig;

pub const ENV_PREFIX: &str = "PAIRGRPO";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Half-width of uniform noise added to oracle scores.
    pub noise: f64,
    /// Scores through an external judge when set.
    pub remote: Option<RemoteSettings>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            noise: 0.0,
            remote: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_scale: f64,
    /// Sampler used for training rollouts.
    pub sampler: SamplerSettings,
    /// Probability of replacing the prompt with the null prompt during
    /// supervised fine-tuning.
    pub cfg_dropout: f64,
    pub sft_steps: u64,
    pub sft_batch_size: usize,
    pub sft_lr: f64,
    pub sft_warmup_steps: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            window: 8,
            embed_dim: 8,
            hidden_dim: 64,
            init_scale: 1.0,
            sampler: SamplerSettings::default(),
            cfg_dropout: 0.1,
            sft_steps: 800,
            sft_batch_size: 32,
            sft_lr: 1e-2,
            sft_warmup_steps: 20,
        }
    }
}

impl PolicyConfig {
    pub fn architecture(&self, vocab: &VocabSpec) -> Architecture {
        Architecture::for_vocab(vocab, self.window, self.embed_dim, self.hidden_dim)
    }

    pub fn sft_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: LrKind::Cosine,
            peak: self.sft_lr,
            convert_lr: self.sft_lr,
            convert_step: self.sft_warmup_steps + 1,
            min_lr: self.sft_lr * 0.02,
            warmup_steps: self.sft_warmup_steps,
            total_steps: self.sft_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub mode: Mode,
    /// Samples per prompt (G).
    pub group_size: usize,
    /// Prompt pairs per iteration; unpaired modes draw twice as many single
    /// prompts so every mode samples the same number of sequences.
    pub batch_pairs: usize,
    pub iterations: u64,
    pub std_floor: f64,
    pub p_schedule: PScheduleKind,
    pub refresh: RefreshTrigger,
    pub clip_eps: f64,
    pub kl_beta: f64,
    /// Whether ground-truth members contribute loss terms or only group
    /// statistics.
    pub gt_in_loss: bool,
    pub checkpoint_every: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            mode: Mode::PairGrpo,
            group_size: 7,
            batch_pairs: 8,
            iterations: 1_000,
            std_floor: 1e-6,
            p_schedule: PScheduleKind::Linear,
            refresh: RefreshTrigger::Manual,
            clip_eps: 0.2,
            kl_beta: 0.01,
            gt_in_loss: true,
            checkpoint_every: 100,
        }
    }
}

impl GrpoConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            gt_in_loss: self.gt_in_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Schedule anchors. `total_steps` is replaced by the iteration count of
    /// the run, keeping the warmup and convert points proportional.
    pub schedule: LrSchedule,
    /// Multiplies every rate of the schedule.
    pub lr_multiplier: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimizerConfig {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
            clip_norm: a.clip_norm,
            schedule: LrSchedule::reference(),
            lr_multiplier: 400.0,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }

    pub fn schedule_for(&self, iterations: u64) -> LrSchedule {
        let s = self.schedule.scaled(self.lr_multiplier);
        if iterations == s.total_steps {
            s
        } else {
            s.resized(iterations)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub per_category: usize,
    pub suite_seed: u64,
    pub sampler: SamplerSettings,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            per_category: 50,
            suite_seed: 1_000,
            sampler: SamplerSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub grpo: GrpoConfig,
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let vocab = self.world.vocab()?;
        self.policy.architecture(&vocab).validate()?;
        self.policy.sampler.validate(vocab.vocab_size())?;
        self.eval.sampler.validate(vocab.vocab_size())?;
        if !(0.0..=1.0).contains(&self.policy.cfg_dropout) {
            return Err(invalid("policy.cfg_dropout must be a probability"));
        }
        if self.policy.sft_batch_size == 0 || self.grpo.group_size == 0 || self.grpo.batch_pairs == 0 {
            return Err(invalid("batch and group sizes must be positive"));
        }
        if self.policy.sft_steps > 0 {
            self.policy.sft_schedule().validate()?;
        }
        if self.grpo.iterations == 0 {
            return Err(invalid("grpo.iterations must be positive"));
        }
        if !(self.grpo.clip_eps > 0.0 && self.grpo.clip_eps < 1.0) || !(self.grpo.kl_beta >= 0.0) {
            return Err(invalid("need 0 < clip_eps < 1 and kl_beta >= 0"));
        }
        if !(self.reward.noise >= 0.0) {
            return Err(invalid("reward.noise must be nonnegative"));
        }
        if !(self.optimizer.lr_multiplier > 0.0) {
            return Err(invalid("optimizer.lr_multiplier must be positive"));
        }
        self.optimizer.adamw().validate()?;
        self.optimizer.schedule.validate()?;
        self.optimizer.schedule_for(self.grpo.iterations).validate()?;
        if self.grpo.checkpoint_every == 0 {
            return Err(invalid("grpo.checkpoint_every must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Builds the effective configuration from its layers.
#[derive(Debug, Clone)]
pub struct ConfigLoader {
    root: toml::Table,
}

impl Default for ConfigLoader {
    fn default() -> Self {
        ConfigLoader::new()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigLoader {
    pub fn new() -> Self {
        ConfigLoader {
            root: toml::Table::new(),
        }
    }

    pub fn file(mut self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        self = self.text(&text)?;
        Ok(self)
    }

    pub fn text(mut self, text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        merge(&mut self.root, table);
        Ok(self)
    }

    /// Sets one dotted key, e.g. `grpo.mode` to `vanilla_grpo`.
    pub fn set(mut self, dotted: &str, raw: &str) -> Result<Self> {
        let parts: Vec<&str> = dotted.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(invalid(format!("bad config key `{dotted}`")));
        }
        let mut table = &mut self.root;
        for part in &parts[..parts.len() - 1] {
            let entry = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| invalid(format!("`{part}` in `{dotted}` is not a section")))?;
        }
        table.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
        Ok(self)
    }

    /// `key=value` form of [`ConfigLoader::set`].
    pub fn assignment(self, assignment: &str) -> Result<Self> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v.trim())
    }

    /// Applies `PREFIX__SECTION__KEY` variables from `vars`.
    pub fn env<I: IntoIterator<Item = (String, String)>>(mut self, prefix: &str, vars: I) -> Result<Self> {
        let lead = format!("{prefix}__");
        let mut matching: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(&lead)
                    .map(|rest| (rest.to_lowercase().replace("__", "."), v))
            })
            .collect();
        matching.sort();
        for (k, v) in matching {
            self = self.set(&k, &v)?;
        }
        Ok(self)
    }

    pub fn build(self) -> Result<RunConfig> {
        let config: RunConfig = toml::Value::Table(self.root)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
