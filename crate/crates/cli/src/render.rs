use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use pairgrpo_core::eval::{DeltaRow, EvalReport};
use pairgrpo_core::train::StepMetrics;

use crate::error::CliResult;

pub fn report_table(report: &EvalReport) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{:<20} {:>7} {:>7} {:>7} {:>5}",
        "category", "s_a", "s_g", "gap", "N"
    )
    .unwrap();
    for r in report.rows() {
        writeln!(
            out,
            "{:<20} {:>7.4} {:>7.4} {:>7.4} {:>5}",
            r.category, r.s_a, r.s_g, r.gap, r.n
        )
        .unwrap();
    }
    out
}

pub fn delta_table(rows: &[DeltaRow]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<20} {:>8} {:>8} {:>8}", "category", "d_s_a", "d_s_g", "d_gap").unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<20} {:>+8.4} {:>+8.4} {:>+8.4}",
            r.category, r.d_s_a, r.d_s_g, r.d_gap
        )
        .unwrap();
    }
    out
}

/// Mean of each metric over consecutive windows of iterations.
pub fn metrics_summary(metrics: &[StepMetrics]) -> String {
    let mut out = String::new();
    if metrics.is_empty() {
        out.push_str("no metrics\n");
        return out;
    }
    let window = (metrics.len() / 10).max(1);
    writeln!(
        out,
        "{:>12} {:>8} {:>6} {:>10} {:>8} {:>8}",
        "iters", "reward", "p", "lr", "clip", "kl"
    )
    .unwrap();
    for chunk in metrics.chunks(window) {
        let n = chunk.len() as f64;
        let mean = |f: fn(&StepMetrics) -> f64| chunk.iter().map(f).sum::<f64>() / n;
        writeln!(
            out,
            "{:>12} {:>8.4} {:>6.3} {:>10.3e} {:>8.4} {:>8.4}",
            format!("{}-{}", chunk[0].iter, chunk[chunk.len() - 1].iter),
            mean(|m| m.mean_reward),
            mean(|m| m.p),
            mean(|m| m.lr),
            mean(|m| m.clip_frac),
            mean(|m| m.mean_kl),
        )
        .unwrap();
    }
    out
}

#[derive(Serialize)]
struct CurveRow {
    iter: u64,
    mean_reward: f64,
    p: f64,
    lr: f64,
    clip_frac: f64,
    mean_kl: f64,
    wall_ms: u64,
}

pub fn write_curves_csv(path: &Path, metrics: &[StepMetrics]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metrics {
        w.serialize(CurveRow {
            iter: m.iter,
            mean_reward: m.mean_reward,
            p: m.p,
            lr: m.lr,
            clip_frac: m.clip_frac,
            mean_kl: m.mean_kl,
            wall_ms: m.wall_ms,
        })?;
    }
    w.flush()?;
    Ok(())
}
