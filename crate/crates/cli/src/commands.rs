use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use pairgrpo_core::config::RunConfig;
use pairgrpo_core::eval::{aggregate, compare_reports, score_suite, EvalReport, ReportRow};
use pairgrpo_core::policy::{PolicyParams, PolicySnapshot, SnapshotRole};
use pairgrpo_core::record::{read_records, write_records, RecordType, RecordWriter};
use pairgrpo_core::reward::{OracleReward, RemoteReward, RewardScorer};
use pairgrpo_core::train::{run_sft, Checkpoint, StepMetrics, TrainState, Trainer};
use pairgrpo_core::world::{build_eval_suite, generate_dataset, EvalCase, EvalSuite};
use pairgrpo_core::{rng, Category, PairedRecord, VocabSpec};

use crate::args::{CompareArgs, EvalArgs, GenDataArgs, ReportArgs, SftArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::render;

/// Set by the interrupt handler; training loops checkpoint and stop.
pub static STOP: AtomicBool = AtomicBool::new(false);

fn quoted(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

pub(crate) fn mode_override(mode: &Option<String>) -> Vec<(&'static str, String)> {
    mode.iter().map(|m| ("grpo.mode", quoted(m))).collect()
}

pub(crate) fn endpoint_override(endpoint: &Option<String>) -> Vec<(&'static str, String)> {
    endpoint.iter().map(|e| ("reward.remote.endpoint", quoted(e))).collect()
}

pub fn build_scorer(config: &RunConfig, vocab: &VocabSpec) -> CliResult<Box<dyn RewardScorer>> {
    match &config.reward.remote {
        Some(remote) if !remote.endpoint.is_empty() => Ok(Box::new(RemoteReward::new(remote.clone(), vocab)?)),
        _ => Ok(Box::new(
            OracleReward::new(vocab.clone()).with_noise(config.reward.noise, config.seed),
        )),
    }
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("seed", s.to_string()));
    }
    if let Some(n) = args.pairs {
        extra.push(("world.pairs", n.to_string()));
    }
    if let Some(t) = args.theta_pos {
        extra.push(("world.theta_pos", format!("{t:?}")));
    }
    if let Some(t) = args.theta_neg {
        extra.push(("world.theta_neg", format!("{t:?}")));
    }
    if let Some(list) = &args.categories {
        let chosen: Vec<Category> = list
            .split(',')
            .map(|s| Category::parse(s.trim()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let w = 1.0 / chosen.len() as f64;
        let weights: Vec<String> = Category::ALL
            .iter()
            .map(|c| format!("{:?}", if chosen.contains(c) { w } else { 0.0 }))
            .collect();
        extra.push(("world.category_weights", format!("[{}]", weights.join(", "))));
    }
    let config = args.cfg.load(&extra)?;
    let (data, suite) = generate(&config, &args.out, args.suite_out.as_deref())?;
    let mut counts: BTreeMap<Category, usize> = BTreeMap::new();
    for r in &data {
        *counts.entry(r.category).or_default() += 1;
    }
    println!("wrote {} verified pairs to {}", data.len(), args.out.display());
    for (c, n) in counts {
        println!("  {c:<20} {n}");
    }
    if let (Some(s), Some(path)) = (suite, &args.suite_out) {
        println!("wrote {} held-out cases to {}", s.cases.len(), path.display());
    }
    Ok(())
}

pub(crate) fn generate(
    config: &RunConfig,
    out: &Path,
    suite_out: Option<&Path>,
) -> CliResult<(Vec<PairedRecord>, Option<EvalSuite>)> {
    let data = generate_dataset(config.seed, &config.world)?;
    write_records(out, RecordType::PairedRecord, &data)?;
    let suite = match suite_out {
        Some(path) => {
            let suite = build_eval_suite(config.eval.per_category, config.eval.suite_seed, &config.world)?;
            write_records(path, RecordType::EvalCase, &suite.cases)?;
            Some(suite)
        }
        None => None,
    };
    Ok((data, suite))
}

pub(crate) fn load_data(path: &Path) -> CliResult<Vec<PairedRecord>> {
    Ok(read_records(path, RecordType::PairedRecord)?)
}

pub fn sft(args: &SftArgs) -> CliResult<()> {
    let config = args.cfg.load(&[])?;
    let data = load_data(&args.data)?;
    let state = sft_stage(&config, &data, &args.out, args.metrics_out.as_deref())?;
    println!(
        "fine-tuned policy {} written to {}",
        &state.params.digest()[..12],
        args.out.display()
    );
    Ok(())
}

pub(crate) fn initial_params(config: &RunConfig) -> CliResult<PolicyParams> {
    let vocab = config.world.vocab()?;
    let arch = config.policy.architecture(&vocab);
    Ok(PolicyParams::init(
        arch,
        config.policy.init_scale,
        &mut rng::stream(config.seed, "init", &[]),
    )?)
}

pub(crate) fn sft_stage(
    config: &RunConfig,
    data: &[PairedRecord],
    out: &Path,
    metrics_out: Option<&Path>,
) -> CliResult<TrainState> {
    let mut params = initial_params(config)?;
    let mut writer = metrics_out
        .map(|p| RecordWriter::create(p, RecordType::Metrics))
        .transpose()?;
    let mut write_err = None;
    let log = run_sft(&mut params, data, config, |m| {
        if let Some(w) = writer.as_mut() {
            if let Err(e) = w.write(m) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    if let Some(last) = log.last() {
        log::info!("sft finished after {} steps, loss {:.4}", log.len(), last.loss);
    }
    let state = TrainState::new(params, config)?;
    Checkpoint::new(&state, &config.digest()).save(out)?;
    Ok(state)
}

/// Keeps metrics lines from iterations before `iteration`, so a resumed run
/// produces the same file as an uninterrupted one.
fn open_metrics(path: &Path, iteration: u64) -> CliResult<RecordWriter<std::io::BufWriter<std::fs::File>>> {
    let kept: Vec<StepMetrics> = if iteration > 0 && path.exists() {
        read_records::<StepMetrics>(path, RecordType::Metrics)?
            .into_iter()
            .filter(|m| m.iter < iteration)
            .collect()
    } else {
        Vec::new()
    };
    let mut w = RecordWriter::create(path, RecordType::Metrics)?;
    for m in &kept {
        w.write(m)?;
    }
    Ok(w)
}

pub(crate) struct TrainOptions<'a> {
    pub checkpoint: &'a Path,
    pub metrics_out: &'a Path,
    pub record_wall_time: bool,
    pub stop_after: Option<u64>,
}

/// Runs training to completion from `state`, checkpointing periodically, on
/// interruption and before propagating a numerical failure.
pub(crate) fn train_loop(
    config: &RunConfig,
    data: &[PairedRecord],
    state: &mut TrainState,
    opts: &TrainOptions<'_>,
) -> CliResult<()> {
    let vocab = config.world.vocab()?;
    let scorer = build_scorer(config, &vocab)?;
    let mut trainer = Trainer::new(config, &vocab, data, scorer.as_ref())?;
    trainer.record_wall_time = opts.record_wall_time;
    let digest = config.digest();
    let save = |s: &TrainState| Checkpoint::new(s, &digest).save(opts.checkpoint);
    let mut metrics = open_metrics(opts.metrics_out, state.iteration)?;
    let stop_at = opts.stop_after.map(|n| state.iteration + n);
    while !trainer.finished(state) && stop_at.is_none_or(|s| state.iteration < s) {
        if STOP.load(Ordering::SeqCst) {
            metrics.flush()?;
            save(state)?;
            return Err(CliError::Interrupted(opts.checkpoint.display().to_string()));
        }
        let backup = state.clone();
        let m = match trainer.step(state) {
            Ok(m) => m,
            Err(e) => {
                *state = backup;
                metrics.flush()?;
                save(state)?;
                return Err(e.into());
            }
        };
        metrics.write(&m)?;
        if (m.iter + 1) % 25 == 0 {
            log::info!(
                "iter {} reward {:.3} p {:.2} lr {:.2e} kl {:.4}",
                m.iter,
                m.mean_reward,
                m.p,
                m.lr,
                m.mean_kl
            );
        }
        if state.iteration.is_multiple_of(config.grpo.checkpoint_every) {
            metrics.flush()?;
            save(state)?;
        }
    }
    metrics.flush()?;
    save(state)?;
    Ok(())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut extra = mode_override(&args.mode);
    extra.extend(endpoint_override(&args.reward_endpoint));
    let config = args.cfg.load(&extra)?;
    let data = load_data(&args.data)?;
    let mut state = match (&args.resume, &args.init) {
        (Some(path), _) => Checkpoint::load(path)?.resume(&config.digest())?,
        (None, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            TrainState::new(ck.state.params, &config)?
        }
        (None, None) => return Err(CliError::Config("either --init or --resume is required".into())),
    };
    if let Some(scale) = args.lr_scale {
        if !(scale > 0.0) {
            return Err(CliError::Config("--lr-scale must be positive".into()));
        }
        state.lr_scale = scale;
    }
    train_loop(
        &config,
        &data,
        &mut state,
        &TrainOptions {
            checkpoint: &args.checkpoint,
            metrics_out: &args.metrics_out,
            record_wall_time: !args.no_wall_time,
            stop_after: args.stop_after,
        },
    )?;
    println!(
        "at iteration {} of {} in mode {}; checkpoint {}",
        state.iteration,
        config.grpo.iterations,
        state.mode,
        args.checkpoint.display()
    );
    Ok(())
}

pub(crate) fn load_suite(path: &Path) -> CliResult<EvalSuite> {
    let cases: Vec<EvalCase> = read_records(path, RecordType::EvalCase)?;
    Ok(EvalSuite { cases })
}

pub(crate) fn evaluate(config: &RunConfig, params: &PolicyParams, suite: &EvalSuite) -> CliResult<EvalReport> {
    let vocab = config.world.vocab()?;
    let scorer = build_scorer(config, &vocab)?;
    let snapshot = PolicySnapshot::freeze(params, SnapshotRole::Old);
    let results = score_suite(
        &snapshot,
        suite,
        &vocab,
        &config.eval.sampler,
        scorer.as_ref(),
        config.eval.suite_seed,
    )?;
    Ok(aggregate(&results, &suite.digest())?)
}

pub fn write_report(path: &Path, report: &EvalReport) -> CliResult<()> {
    write_records(path, RecordType::ReportRow, &report.to_rows())?;
    Ok(())
}

pub fn read_report(path: &Path) -> CliResult<EvalReport> {
    let rows: Vec<ReportRow> = read_records(path, RecordType::ReportRow)?;
    Ok(EvalReport::from_rows(&rows)?)
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let config = args.cfg.load(&endpoint_override(&args.reward_endpoint))?;
    let params = Checkpoint::load(&args.checkpoint)?.state.params;
    let suite = match &args.suite {
        Some(p) => load_suite(p)?,
        None => build_eval_suite(config.eval.per_category, config.eval.suite_seed, &config.world)?,
    };
    let report = evaluate(&config, &params, &suite)?;
    write_report(&args.report_out, &report)?;
    print!("{}", render::report_table(&report));
    Ok(())
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    if args.report.is_none() && args.metrics.is_none() {
        return Err(CliError::Config("give --report and/or --metrics".into()));
    }
    if let Some(path) = &args.report {
        print!("{}", render::report_table(&read_report(path)?));
    }
    if let Some(path) = &args.metrics {
        let metrics: Vec<StepMetrics> = read_records(path, RecordType::Metrics)?;
        print!("{}", render::metrics_summary(&metrics));
        if let Some(out) = &args.csv_out {
            render::write_curves_csv(out, &metrics)?;
            println!("curves written to {}", out.display());
        }
    } else if args.csv_out.is_some() {
        return Err(CliError::Config("--csv-out needs --metrics".into()));
    }
    Ok(())
}

pub fn compare(args: &CompareArgs) -> CliResult<()> {
    let a = read_report(&args.baseline)?;
    let b = read_report(&args.candidate)?;
    let deltas = compare_reports(&a, &b).map_err(|e| CliError::Other(e.to_string()))?;
    print!("{}", render::delta_table(&deltas));
    Ok(())
}
