use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use pairgrpo_core::config::{ConfigLoader, RunConfig, ENV_PREFIX};

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "pairgrpo", version, about = "Pair-GRPO on synthetic token-grid worlds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate verified prompt pairs and, optionally, the held-out suite.
    GenData(GenDataArgs),
    /// Supervised fine-tuning on ground-truth grids.
    Sft(SftArgs),
    /// Reinforcement learning from a fine-tuned checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out pair suite.
    Eval(EvalArgs),
    /// Render a report table and export metric curves as CSV.
    Report(ReportArgs),
    /// Per-category differences between two reports on the same suite.
    Compare(CompareArgs),
    /// gen-data, sft, train, eval and report in one output directory.
    Run(RunArgs),
}

/// Configuration layers shared by every stage.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set grpo.group_size=7`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// Defaults, then the file, then `PAIRGRPO__*` variables, then `--set`
    /// flags, then `extra` (dedicated flags of the subcommand).
    pub fn load(&self, extra: &[(&str, String)]) -> CliResult<RunConfig> {
        let cfg_err = |e: pairgrpo_core::Error| CliError::Config(e.to_string());
        let mut loader = ConfigLoader::new();
        if let Some(path) = &self.config {
            loader = loader.file(path).map_err(cfg_err)?;
        }
        loader = loader.env(ENV_PREFIX, std::env::vars()).map_err(cfg_err)?;
        for o in &self.overrides {
            loader = loader.assignment(o).map_err(cfg_err)?;
        }
        for (k, v) in extra {
            loader = loader.set(k, v).map_err(cfg_err)?;
        }
        loader.build().map_err(cfg_err)
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Comma-separated subset of overall_appearance,color,counting,position.
    #[arg(long)]
    pub categories: Option<String>,
    #[arg(long)]
    pub theta_pos: Option<f64>,
    #[arg(long)]
    pub theta_neg: Option<f64>,
    /// Training pairs output.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out evaluation suite output.
    #[arg(long)]
    pub suite_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SftArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// pair_grpo, no_group_expanding, no_gt_image or vanilla_grpo.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    /// Starting policy (a fine-tuned checkpoint).
    #[arg(long, required_unless_present = "resume")]
    pub init: Option<PathBuf>,
    /// Continue a training checkpoint written under the same configuration.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint output, rewritten periodically and on interruption.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub metrics_out: PathBuf,
    /// Score through an external judge at HOST:PORT.
    #[arg(long)]
    pub reward_endpoint: Option<String>,
    /// Multiplies the learning rate from this point on.
    #[arg(long)]
    pub lr_scale: Option<f64>,
    /// Write wall_ms = 0 so metrics files are byte-reproducible.
    #[arg(long)]
    pub no_wall_time: bool,
    /// Checkpoint and exit after this many iterations; continue with --resume.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Suite file from gen-data; built from the configuration when absent.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub report_out: PathBuf,
    #[arg(long)]
    pub reward_endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report file from eval.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Metrics file from train.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// CSV of the metric curves.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub baseline: PathBuf,
    pub candidate: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub reward_endpoint: Option<String>,
    #[arg(long)]
    pub no_wall_time: bool,
}
