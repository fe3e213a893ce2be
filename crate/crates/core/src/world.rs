//! Synthetic paired data: scene sampling, ground-truth rendering, minimal
//! prompt perturbations, pair verification and held-out evaluation suites.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::record::sha256_hex;
use crate::reward::reward;
use crate::rng::{self, StreamRng};
use crate::types::{
    Category, Color, ObjectSpec, PairedRecord, PromptSpec, Relation, RelationKind, Shape, TokenGrid, VocabSpec,
    MAX_COUNT, MAX_OBJECTS,
};

const RENDER_ATTEMPTS: usize = 500;
const ACCEPT_ATTEMPTS: u64 = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub max_objects: usize,
    /// Weights for overall_appearance, color, counting, position.
    pub category_weights: [f64; 4],
    pub theta_pos: f64,
    pub theta_neg: f64,
    /// Probability that the second grid is re-rendered instead of edited.
    pub rerandomize_prob: f64,
    pub max_retries: usize,
    pub pairs: usize,
    /// One in this many pair keys is reserved for evaluation.
    pub holdout_modulus: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            grid_height: 4,
            grid_width: 4,
            shapes: Shape::ALL.to_vec(),
            colors: Color::ALL.to_vec(),
            max_objects: 2,
            category_weights: [0.25; 4],
            theta_pos: 0.99,
            theta_neg: 0.80,
            rerandomize_prob: 0.3,
            max_retries: 20,
            pairs: 5_000,
            holdout_modulus: 5,
        }
    }
}

impl WorldConfig {
    pub fn vocab(&self) -> Result<VocabSpec> {
        VocabSpec::new(
            self.grid_height,
            self.grid_width,
            self.shapes.clone(),
            self.colors.clone(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        let sum: f64 = self.category_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.category_weights.iter().any(|&w| w < 0.0) {
            return Err(invalid("category weights must be non-negative and sum to 1"));
        }
        if self.max_objects == 0 || self.max_objects > MAX_OBJECTS {
            return Err(invalid(format!("max_objects must be in 1..={MAX_OBJECTS}")));
        }
        if self.max_objects < 2 && self.category_weights[3] > 0.0 {
            return Err(invalid("position pairs need max_objects >= 2"));
        }
        if !(0.0 <= self.theta_neg && self.theta_neg < self.theta_pos && self.theta_pos <= 1.0) {
            return Err(invalid("need 0 <= theta_neg < theta_pos <= 1"));
        }
        if !(0.0..=1.0).contains(&self.rerandomize_prob) {
            return Err(invalid("rerandomize_prob must be a probability"));
        }
        if self.holdout_modulus < 2 {
            return Err(invalid("holdout_modulus must be at least 2"));
        }
        Ok(())
    }
}

/// Draws base scenes for each difference category.
pub struct SceneSampler<'a> {
    vocab: &'a VocabSpec,
    category_weights: [f64; 4],
    max_objects: usize,
}

impl<'a> SceneSampler<'a> {
    pub fn new(vocab: &'a VocabSpec, config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        Ok(SceneSampler {
            vocab,
            category_weights: config.category_weights,
            max_objects: config.max_objects,
        })
    }

    pub fn sample_category(&self, rng: &mut StreamRng) -> Category {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, w) in Category::ALL.iter().zip(self.category_weights) {
            acc += w;
            if u < acc {
                return *c;
            }
        }
        *Category::ALL
            .iter()
            .zip(self.category_weights)
            .rev()
            .find(|(_, w)| *w > 0.0)
            .map(|(c, _)| c)
            .expect("some category has weight")
    }

    fn distinct_objects(&self, n: usize, rng: &mut StreamRng) -> Vec<ObjectSpec> {
        let mut out: Vec<ObjectSpec> = Vec::with_capacity(n);
        while out.len() < n {
            let shape = *self.vocab.shapes().choose(rng).expect("shapes");
            let color = *self.vocab.colors().choose(rng).expect("colors");
            if !out.iter().any(|o| o.shape == shape && o.color == color) {
                out.push(ObjectSpec::new(shape, color, 1));
            }
        }
        out
    }

    fn relation(rng: &mut StreamRng) -> Relation {
        Relation {
            subject: 0,
            kind: *RelationKind::ALL.choose(rng).expect("kinds"),
            object: 1,
        }
    }

    /// A base scene whose category-relevant fields admit a perturbation.
    pub fn sample_base(&self, category: Category, rng: &mut StreamRng) -> Result<PromptSpec> {
        match category {
            Category::OverallAppearance | Category::Color => {
                let n = if self.max_objects >= 2 && rng.gen_bool(0.6) {
                    2
                } else {
                    1
                };
                let objects = self.distinct_objects(n, rng);
                let relations = if n == 2 && rng.gen_bool(0.5) {
                    vec![Self::relation(rng)]
                } else {
                    vec![]
                };
                PromptSpec::new(objects, relations, category)
            }
            Category::Counting => {
                let mut objects = self.distinct_objects(1, rng);
                objects[0].count = rng.gen_range(1..=2);
                PromptSpec::new(objects, vec![], category)
            }
            Category::Position => {
                if self.max_objects < 2 {
                    return Err(invalid("position scenes need two objects"));
                }
                let objects = self.distinct_objects(2, rng);
                PromptSpec::new(objects, vec![Self::relation(rng)], category)
            }
        }
    }
}

fn relation_feasible(vocab: &VocabSpec, kind: RelationKind) -> bool {
    match kind {
        RelationKind::LeftOf | RelationKind::RightOf => vocab.grid_width() >= 2,
        RelationKind::Above | RelationKind::Below => vocab.grid_height() >= 2,
    }
}

fn relations_hold(spec: &PromptSpec, placements: &[Vec<usize>], vocab: &VocabSpec) -> Option<Relation> {
    spec.relations().iter().copied().find(|r| {
        !placements[r.subject].iter().all(|&s| {
            placements[r.object]
                .iter()
                .all(|&o| r.kind.holds(vocab.cell_of(s), vocab.cell_of(o)))
        })
    })
}

/// Renders a grid that satisfies `spec` exactly; free placement is random.
pub fn render_ground_truth(spec: &PromptSpec, vocab: &VocabSpec, rng: &mut StreamRng) -> Result<TokenGrid> {
    vocab.check_prompt(spec).map_err(|e| Error::Generation(e.to_string()))?;
    if let Some(r) = spec.relations().iter().find(|r| !relation_feasible(vocab, r.kind)) {
        return Err(Error::Generation(format!(
            "relation `{}` cannot hold on a {}x{} grid",
            r.kind.words(),
            vocab.grid_height(),
            vocab.grid_width()
        )));
    }
    let cells: Vec<usize> = (0..vocab.seq_len()).collect();
    let mut violated = None;
    for _ in 0..RENDER_ATTEMPTS {
        let mut free = cells.clone();
        free.shuffle(rng);
        let mut placements = Vec::with_capacity(spec.objects().len());
        for o in spec.objects() {
            let at = free.split_off(free.len() - o.count as usize);
            placements.push(at);
        }
        match relations_hold(spec, &placements, vocab) {
            None => return Ok(paint(spec, &placements, vocab)),
            Some(r) => violated = Some(r),
        }
    }
    let r = violated.expect("relations exist when placement fails");
    Err(Error::Generation(format!(
        "could not place {} {} {}",
        spec.objects()[r.subject].phrase(),
        r.kind.words(),
        spec.objects()[r.object].phrase()
    )))
}

fn paint(spec: &PromptSpec, placements: &[Vec<usize>], vocab: &VocabSpec) -> TokenGrid {
    let mut grid = TokenGrid::background(vocab);
    for (o, cells) in spec.objects().iter().zip(placements) {
        let token = vocab.token_of(o.shape, o.color).expect("checked prompt");
        for &c in cells {
            grid.set(c, token);
        }
    }
    grid
}

/// Changes exactly the fields the category is about.
pub fn perturb(base: &PromptSpec, category: Category, vocab: &VocabSpec, rng: &mut StreamRng) -> Result<PromptSpec> {
    let mut objects = base.objects().to_vec();
    let mut relations = base.relations().to_vec();
    let i = rng.gen_range(0..objects.len());
    let taken = |objects: &[ObjectSpec], shape: Shape, color: Color| {
        objects
            .iter()
            .enumerate()
            .any(|(j, o)| j != i && o.shape == shape && o.color == color)
    };
    match category {
        Category::OverallAppearance => {
            let options: Vec<Shape> = vocab
                .shapes()
                .iter()
                .copied()
                .filter(|&s| s != objects[i].shape && !taken(&objects, s, objects[i].color))
                .collect();
            objects[i].shape = *options.choose(rng).ok_or_else(|| invalid("no alternative shape"))?;
        }
        Category::Color => {
            let options: Vec<Color> = vocab
                .colors()
                .iter()
                .copied()
                .filter(|&c| c != objects[i].color && !taken(&objects, objects[i].shape, c))
                .collect();
            objects[i].color = *options.choose(rng).ok_or_else(|| invalid("no alternative color"))?;
        }
        Category::Counting => {
            let c = objects[i].count;
            objects[i].count = match (c > 1, c < MAX_COUNT) {
                (true, true) => {
                    if rng.gen_bool(0.5) {
                        c + 1
                    } else {
                        c - 1
                    }
                }
                (false, true) => c + 1,
                (true, false) => c - 1,
                (false, false) => return Err(invalid("count cannot change")),
            };
        }
        Category::Position => {
            let r = relations
                .first_mut()
                .ok_or_else(|| invalid("position perturbation needs a relation"))?;
            r.kind = r.kind.flipped();
        }
    }
    PromptSpec::new(objects, relations, category)
}

/// Edits `grid` (a render of `from`) into a render of `to`, touching only
/// the cells of the changed objects. Returns `None` if a local edit cannot
/// satisfy `to`.
fn edit_grid(
    from: &PromptSpec,
    to: &PromptSpec,
    grid: &TokenGrid,
    vocab: &VocabSpec,
    rng: &mut StreamRng,
) -> Option<TokenGrid> {
    let mut out = grid.clone();
    for (a, b) in from.objects().iter().zip(to.objects()) {
        let ta = vocab.token_of(a.shape, a.color)?;
        let tb = vocab.token_of(b.shape, b.color)?;
        let mut cells: Vec<usize> = (0..vocab.seq_len()).filter(|&p| grid.tokens()[p] == ta).collect();
        if ta != tb {
            for &p in &cells {
                out.set(p, tb);
            }
        }
        if b.count > a.count {
            let mut empty: Vec<usize> = (0..vocab.seq_len()).filter(|&p| out.tokens()[p] == 0).collect();
            empty.shuffle(rng);
            for &p in empty.iter().take((b.count - a.count) as usize) {
                out.set(p, tb);
            }
        } else if b.count < a.count {
            cells.shuffle(rng);
            for &p in cells.iter().take((a.count - b.count) as usize) {
                out.set(p, 0);
            }
        }
    }
    for (ra, rb) in from.relations().iter().zip(to.relations()) {
        if ra.kind == rb.kind {
            continue;
        }
        let s = to.objects()[rb.subject];
        let o = to.objects()[rb.object];
        if s.count != 1 || o.count != 1 {
            return None;
        }
        let ts = vocab.token_of(s.shape, s.color)?;
        let to_ = vocab.token_of(o.shape, o.color)?;
        let ps = out.tokens().iter().position(|&t| t == ts)?;
        let po = out.tokens().iter().position(|&t| t == to_)?;
        out.set(ps, to_);
        out.set(po, ts);
    }
    (reward(to, &out, vocab).total == 1.0).then_some(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairCheck {
    pub same_skeleton: bool,
    pub positives: bool,
    pub negatives: bool,
}

impl PairCheck {
    pub fn passed(&self) -> bool {
        self.same_skeleton && self.positives && self.negatives
    }
}

/// Evaluates the three post-verification conditions without mutating.
pub fn check_pair(rec: &PairedRecord, vocab: &VocabSpec, theta_pos: f64, theta_neg: f64) -> PairCheck {
    let same_skeleton = matches!(rec.prompt_1.field_diff(&rec.prompt_2), Some(1..=3));
    let r11 = reward(&rec.prompt_1, &rec.grid_1, vocab).total;
    let r22 = reward(&rec.prompt_2, &rec.grid_2, vocab).total;
    let r12 = reward(&rec.prompt_1, &rec.grid_2, vocab).total;
    let r21 = reward(&rec.prompt_2, &rec.grid_1, vocab).total;
    PairCheck {
        same_skeleton,
        positives: r11 >= theta_pos && r22 >= theta_pos,
        negatives: r12 <= theta_neg && r21 <= theta_neg,
    }
}

/// Applies the three conditions and records the outcome in `rec.verified`.
pub fn verify_pair(rec: &mut PairedRecord, vocab: &VocabSpec, theta_pos: f64, theta_neg: f64) -> bool {
    rec.verified = check_pair(rec, vocab, theta_pos, theta_neg).passed();
    rec.verified
}

/// Builds and verifies a paired record from a base prompt, retrying the
/// perturbation and rendering up to `config.max_retries` times.
pub fn make_pair(
    base: &PromptSpec,
    category: Category,
    vocab: &VocabSpec,
    config: &WorldConfig,
    rng: &mut StreamRng,
) -> Result<PairedRecord> {
    let prompt_1 = base.with_category(category);
    let mut reason = String::from("no attempt made");
    for _ in 0..config.max_retries.max(1) {
        let prompt_2 = match perturb(&prompt_1, category, vocab, rng) {
            Ok(p) => p,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let grid_1 = match render_ground_truth(&prompt_1, vocab, rng) {
            Ok(g) => g,
            Err(e) => {
                reason = e.to_string();
                continue;
            }
        };
        let edited = if rng.gen_bool(config.rerandomize_prob) {
            None
        } else {
            edit_grid(&prompt_1, &prompt_2, &grid_1, vocab, rng)
        };
        let grid_2 = match edited {
            Some(g) => g,
            None => match render_ground_truth(&prompt_2, vocab, rng) {
                Ok(g) => g,
                Err(e) => {
                    reason = e.to_string();
                    continue;
                }
            },
        };
        let mut rec = PairedRecord {
            prompt_1: prompt_1.clone(),
            grid_1,
            prompt_2,
            grid_2,
            category,
            verified: false,
        };
        let check = check_pair(&rec, vocab, config.theta_pos, config.theta_neg);
        if check.passed() {
            rec.verified = true;
            return Ok(rec);
        }
        reason = format!("verification failed: {check:?}");
    }
    Err(Error::Skipped {
        retries: config.max_retries,
        reason,
    })
}

/// Order-insensitive key of a prompt pair.
pub fn pair_key(a: &PromptSpec, b: &PromptSpec) -> String {
    let (x, y) = if a.surface_text() <= b.surface_text() {
        (a.surface_text(), b.surface_text())
    } else {
        (b.surface_text(), a.surface_text())
    };
    format!("{x} | {y}")
}

/// Pairs in the reserved bucket never appear in training data.
pub fn is_held_out(key: &str, modulus: u64) -> bool {
    rng::stable_hash(key).is_multiple_of(modulus)
}

fn accept_one(
    seed: u64,
    tag: &str,
    index: u64,
    category: Option<Category>,
    want_held_out: bool,
    vocab: &VocabSpec,
    config: &WorldConfig,
) -> Result<PairedRecord> {
    let sampler = SceneSampler::new(vocab, config)?;
    for attempt in 0..ACCEPT_ATTEMPTS {
        let mut rng = rng::stream(seed, tag, &[index, attempt]);
        let cat = category.unwrap_or_else(|| sampler.sample_category(&mut rng));
        let base = sampler.sample_base(cat, &mut rng)?;
        match make_pair(&base, cat, vocab, config, &mut rng) {
            Ok(rec) => {
                let key = pair_key(&rec.prompt_1, &rec.prompt_2);
                if is_held_out(&key, config.holdout_modulus) == want_held_out {
                    return Ok(rec);
                }
            }
            Err(Error::Skipped { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation(format!(
        "no acceptable pair for index {index} after {ACCEPT_ATTEMPTS} attempts"
    )))
}

/// Training pairs: a pure function of `(seed, config)`, never drawing from
/// the held-out bucket.
pub fn generate_dataset(seed: u64, config: &WorldConfig) -> Result<Vec<PairedRecord>> {
    config.validate()?;
    let vocab = config.vocab()?;
    (0..config.pairs as u64)
        .into_par_iter()
        .map(|i| accept_one(seed, "train-data", i, None, false, &vocab, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub id: u64,
    pub category: Category,
    pub prompt_1: PromptSpec,
    pub prompt_2: PromptSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSuite {
    pub cases: Vec<EvalCase>,
}

impl EvalSuite {
    pub fn digest(&self) -> String {
        let mut text = String::new();
        for c in &self.cases {
            text.push_str(&serde_json::to_string(c).expect("case serializes"));
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }

    pub fn by_category(&self, category: Category) -> impl Iterator<Item = &EvalCase> {
        self.cases.iter().filter(move |c| c.category == category)
    }
}

/// `n_per_category` prompt pairs for every category with nonzero weight, all
/// drawn from the held-out bucket.
pub fn build_eval_suite(n_per_category: usize, seed: u64, config: &WorldConfig) -> Result<EvalSuite> {
    if n_per_category == 0 {
        return Err(invalid("n_per_category must be at least 1"));
    }
    config.validate()?;
    let vocab = config.vocab()?;
    let mut jobs = Vec::new();
    for (ci, (&cat, &w)) in Category::ALL.iter().zip(&config.category_weights).enumerate() {
        if w > 0.0 {
            for k in 0..n_per_category {
                jobs.push((cat, (ci * n_per_category + k) as u64));
            }
        }
    }
    let cases = jobs
        .into_par_iter()
        .map(|(cat, id)| {
            let rec = accept_one(seed, "eval-suite", id, Some(cat), true, &vocab, config)?;
            Ok(EvalCase {
                id,
                category: cat,
                prompt_1: rec.prompt_1,
                prompt_2: rec.prompt_2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSuite { cases })
}
