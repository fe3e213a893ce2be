//! The end-to-end `run` pipeline: stages share one output directory, are
//! recorded in a manifest with artifact digests, and are skipped on rerun
//! when their artifacts still verify.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use pairgrpo_core::config::RunConfig;
use pairgrpo_core::eval::compare_reports;
use pairgrpo_core::record::{file_digest, read_records, write_records, RecordType};
use pairgrpo_core::train::{Checkpoint, StepMetrics, TrainState};

use crate::args::RunArgs;
use crate::commands::{
    endpoint_override, evaluate, generate, load_data, load_suite, mode_override, read_report, sft_stage, train_loop,
    write_report, TrainOptions,
};
use crate::error::{CliError, CliResult};
use crate::render;

pub const MANIFEST: &str = "manifest.jsonl";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub completed: bool,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub seed: u64,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub effective_config: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> CliResult<Option<RunManifest>> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let mut items: Vec<RunManifest> = read_records(&path, RecordType::Manifest)?;
        Ok(items.pop())
    }

    fn save(&self, dir: &Path) -> CliResult<()> {
        write_records(&dir.join(MANIFEST), RecordType::Manifest, std::slice::from_ref(self))?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Digests of every artifact, in stage order.
    pub fn artifact_digests(&self) -> Vec<(String, String)> {
        self.stages
            .iter()
            .flat_map(|s| s.artifacts.iter().map(|a| (a.path.clone(), a.digest.clone())))
            .collect()
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Exclusive ownership of an output directory for the life of the guard.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<DirLock> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Other(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct Pipeline<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Pipeline<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `body` unless the stage is already complete with verifying
    /// artifacts. `body` returns the artifact file names it produced.
    fn stage(&mut self, name: &str, body: impl FnOnce(&Self) -> CliResult<Vec<&'static str>>) -> CliResult<()> {
        if let Some(done) = self.manifest.stage(name).filter(|s| s.completed) {
            for a in &done.artifacts {
                let actual = file_digest(&self.path(&a.path))
                    .map_err(|e| CliError::Resume(format!("stage {name}: artifact {}: {e}", a.path)))?;
                if actual != a.digest {
                    return Err(CliError::Resume(format!(
                        "stage {name}: artifact {} changed since it was recorded",
                        a.path
                    )));
                }
            }
            log::info!("stage {name}: up to date");
            return Ok(());
        }
        log::info!("stage {name}: running");
        if self.manifest.stage(name).is_none() {
            self.manifest.stages.push(StageRecord {
                name: name.to_string(),
                completed: false,
                artifacts: Vec::new(),
            });
            self.manifest.save(self.dir)?;
        }
        let produced = body(self)?;
        let artifacts = produced
            .into_iter()
            .map(|f| {
                Ok(Artifact {
                    path: f.to_string(),
                    digest: file_digest(&self.path(f))?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        let rec = self
            .manifest
            .stages
            .iter_mut()
            .find(|s| s.name == name)
            .expect("stage registered");
        rec.completed = true;
        rec.artifacts = artifacts;
        self.manifest.save(self.dir)
    }
}

pub fn run(args: &RunArgs) -> CliResult<RunManifest> {
    let mut extra = mode_override(&args.mode);
    extra.extend(endpoint_override(&args.reward_endpoint));
    let config = args.cfg.load(&extra)?;
    run_pipeline(&config, &args.out_dir, !args.no_wall_time)
}

pub fn run_pipeline(config: &RunConfig, dir: &Path, record_wall_time: bool) -> CliResult<RunManifest> {
    std::fs::create_dir_all(dir)?;
    let _lock = DirLock::acquire(dir)?;
    let digest = config.digest();
    let manifest = match RunManifest::load(dir)? {
        Some(m) if m.config_digest != digest => {
            return Err(CliError::Resume(format!(
                "{} holds a run with config {}, current config is {digest}",
                dir.display(),
                m.config_digest
            )))
        }
        Some(m) => m,
        None => RunManifest {
            config_digest: digest.clone(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started_at: now(),
            finished_at: None,
            effective_config: config.to_toml()?,
            stages: Vec::new(),
        },
    };
    let mut p = Pipeline { dir, manifest };

    p.stage("config", |p| {
        std::fs::write(p.path("config.toml"), config.to_toml()?)?;
        Ok(vec!["config.toml"])
    })?;
    p.stage("gen-data", |p| {
        generate(config, &p.path("data.jsonl"), Some(&p.path("suite.jsonl")))?;
        Ok(vec!["data.jsonl", "suite.jsonl"])
    })?;
    p.stage("sft", |p| {
        let data = load_data(&p.path("data.jsonl"))?;
        sft_stage(
            config,
            &data,
            &p.path("sft.ckpt.jsonl"),
            Some(&p.path("sft_metrics.jsonl")),
        )?;
        Ok(vec!["sft.ckpt.jsonl", "sft_metrics.jsonl"])
    })?;
    p.stage("train", |p| {
        let data = load_data(&p.path("data.jsonl"))?;
        let ckpt = p.path("train.ckpt.jsonl");
        let mut state = if ckpt.exists() {
            log::info!("resuming training from {}", ckpt.display());
            Checkpoint::load(&ckpt)?.resume(&digest)?
        } else {
            TrainState::new(Checkpoint::load(&p.path("sft.ckpt.jsonl"))?.state.params, config)?
        };
        train_loop(
            config,
            &data,
            &mut state,
            &TrainOptions {
                checkpoint: &ckpt,
                metrics_out: &p.path("metrics.jsonl"),
                record_wall_time,
                stop_after: None,
            },
        )?;
        Ok(vec!["train.ckpt.jsonl", "metrics.jsonl"])
    })?;
    p.stage("eval", |p| {
        let suite = load_suite(&p.path("suite.jsonl"))?;
        for (ckpt, out) in [
            ("sft.ckpt.jsonl", "report_sft.jsonl"),
            ("train.ckpt.jsonl", "report.jsonl"),
        ] {
            let params = Checkpoint::load(&p.path(ckpt))?.state.params;
            write_report(&p.path(out), &evaluate(config, &params, &suite)?)?;
        }
        Ok(vec!["report_sft.jsonl", "report.jsonl"])
    })?;
    p.stage("report", |p| {
        let before = read_report(&p.path("report_sft.jsonl"))?;
        let after = read_report(&p.path("report.jsonl"))?;
        let metrics: Vec<StepMetrics> = read_records(&p.path("metrics.jsonl"), RecordType::Metrics)?;
        let deltas = compare_reports(&before, &after)?;
        let text = format!(
            "mode: {}\n\nfine-tuned policy\n{}\ntrained policy\n{}\nchange\n{}\ntraining\n{}",
            config.grpo.mode,
            render::report_table(&before),
            render::report_table(&after),
            render::delta_table(&deltas),
            render::metrics_summary(&metrics),
        );
        std::fs::write(p.path("report.txt"), text)?;
        render::write_curves_csv(&p.path("curves.csv"), &metrics)?;
        Ok(vec!["report.txt", "curves.csv"])
    })?;

    p.manifest.finished_at = Some(now());
    p.manifest.save(dir)?;
    Ok(p.manifest)
}
