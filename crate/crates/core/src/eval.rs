//! Pair-consistency evaluation: two samples per prompt, four scores per case,
//! arithmetic and geometric means per category.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_sequence, PolicySnapshot, SamplerSettings};
use crate::reward::RewardScorer;
use crate::rng;
use crate::types::{Category, VocabSpec};
use crate::world::{EvalCase, EvalSuite};

/// Scores below this are treated as exactly zero.
pub const ZERO_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub id: u64,
    pub category: Category,
    /// `scores[j][k]`: image `k` of prompt `j` scored against prompt `j`.
    pub scores: [[f64; 2]; 2],
}

impl CaseResult {
    pub fn flat(&self) -> [f64; 4] {
        let s = self.scores;
        [s[0][0], s[0][1], s[1][0], s[1][1]]
    }

    pub fn arithmetic(&self) -> f64 {
        self.flat().iter().sum::<f64>() / 4.0
    }

    /// Fourth root of the product, computed in log space.
    pub fn geometric(&self) -> f64 {
        let f = self.flat();
        if f.iter().any(|&x| x < ZERO_GUARD) {
            return 0.0;
        }
        (f.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
    }
}

pub fn score_case(
    snapshot: &PolicySnapshot,
    case: &EvalCase,
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    scorer: &dyn RewardScorer,
    seed: u64,
) -> Result<CaseResult> {
    let mut scores = [[0.0; 2]; 2];
    for (j, prompt) in [&case.prompt_1, &case.prompt_2].into_iter().enumerate() {
        for (k, slot) in scores[j].iter_mut().enumerate() {
            let mut r = rng::stream(seed, "eval-sample", &[case.id, j as u64, k as u64]);
            let seq = sample_sequence(snapshot, prompt.prompt_tokens(), vocab, settings, &mut r)?;
            let key = rng::derive_seed(seed, "eval-reward", &[case.id, j as u64, k as u64]);
            *slot = scorer.score(prompt, &seq.grid, key)?;
        }
    }
    Ok(CaseResult {
        id: case.id,
        category: case.category,
        scores,
    })
}

pub fn score_suite(
    snapshot: &PolicySnapshot,
    suite: &EvalSuite,
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    scorer: &dyn RewardScorer,
    seed: u64,
) -> Result<Vec<CaseResult>> {
    suite
        .cases
        .par_iter()
        .map(|c| score_case(snapshot, c, vocab, settings, scorer, seed))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    /// A category name, or `overall`.
    pub category: String,
    pub s_a: f64,
    pub s_g: f64,
    pub gap: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite_digest: String,
    pub categories: Vec<CategoryScore>,
    pub overall: CategoryScore,
}

impl EvalReport {
    pub fn category(&self, name: &str) -> Option<&CategoryScore> {
        if name == "overall" {
            return Some(&self.overall);
        }
        self.categories.iter().find(|c| c.category == name)
    }

    /// Per-category rows followed by the overall row.
    pub fn rows(&self) -> impl Iterator<Item = &CategoryScore> {
        self.categories.iter().chain(std::iter::once(&self.overall))
    }
}

/// Per-category means over cases and their unweighted average. Categories
/// without cases are left out.
pub fn aggregate(results: &[CaseResult], suite_digest: &str) -> Result<EvalReport> {
    let mut categories = Vec::new();
    for cat in Category::ALL {
        let cases: Vec<&CaseResult> = results.iter().filter(|r| r.category == cat).collect();
        if cases.is_empty() {
            log::warn!("no evaluation cases for category {cat}");
            continue;
        }
        let n = cases.len() as f64;
        let s_a = cases.iter().map(|c| c.arithmetic()).sum::<f64>() / n;
        let s_g = cases.iter().map(|c| c.geometric()).sum::<f64>() / n;
        categories.push(CategoryScore {
            category: cat.name().to_string(),
            s_a,
            s_g,
            gap: s_a - s_g,
            n: cases.len(),
        });
    }
    if categories.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let k = categories.len() as f64;
    let s_a = categories.iter().map(|c| c.s_a).sum::<f64>() / k;
    let s_g = categories.iter().map(|c| c.s_g).sum::<f64>() / k;
    let overall = CategoryScore {
        category: "overall".into(),
        s_a,
        s_g,
        gap: s_a - s_g,
        n: results.len(),
    };
    Ok(EvalReport {
        suite_digest: suite_digest.to_string(),
        categories,
        overall,
    })
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub category: String,
    pub s_a: f64,
    pub s_g: f64,
    pub gap: f64,
    pub n: usize,
    pub suite_digest: String,
}

impl EvalReport {
    pub fn to_rows(&self) -> Vec<ReportRow> {
        self.rows()
            .map(|c| ReportRow {
                category: c.category.clone(),
                s_a: c.s_a,
                s_g: c.s_g,
                gap: c.gap,
                n: c.n,
                suite_digest: self.suite_digest.clone(),
            })
            .collect()
    }

    /// Inverse of [`EvalReport::to_rows`]; the overall row comes last.
    pub fn from_rows(rows: &[ReportRow]) -> Result<Self> {
        let (last, rest) = rows.split_last().ok_or(Error::Missing("report rows"))?;
        if last.category != "overall" {
            return Err(Error::Format("report must end with the overall row".into()));
        }
        if rows.iter().any(|r| r.suite_digest != last.suite_digest) {
            return Err(Error::Format("report rows disagree on the suite digest".into()));
        }
        let score = |r: &ReportRow| CategoryScore {
            category: r.category.clone(),
            s_a: r.s_a,
            s_g: r.s_g,
            gap: r.gap,
            n: r.n,
        };
        Ok(EvalReport {
            suite_digest: last.suite_digest.clone(),
            categories: rest.iter().map(score).collect(),
            overall: score(last),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub category: String,
    pub d_s_a: f64,
    pub d_s_g: f64,
    pub d_gap: f64,
}

/// `b - a` per category present in both reports.
pub fn compare_reports(a: &EvalReport, b: &EvalReport) -> Result<Vec<DeltaRow>> {
    if a.suite_digest != b.suite_digest {
        return Err(Error::Validation(format!(
            "reports come from different suites ({} vs {})",
            a.suite_digest, b.suite_digest
        )));
    }
    Ok(a.rows()
        .filter_map(|ra| {
            b.category(&ra.category).map(|rb| DeltaRow {
                category: ra.category.clone(),
                d_s_a: rb.s_a - ra.s_a,
                d_s_g: rb.s_g - ra.s_g,
                d_gap: rb.gap - ra.gap,
            })
        })
        .collect())
}
