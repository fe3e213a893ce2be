//! Conditional autoregressive policy over token grids.
//!
//! At step `j` the network sees the prompt encoding, the last `window` grid
//! tokens (padded with a start token) and a one-hot of `j`:
//!
//! ```text
//! x = [E_p[p_0] .. E_p[p_{L-1}] | E_t[y_{j-1}] .. E_t[y_{j-c}] | onehot(j)]
//! h = tanh(W1 x + b1)
//! logits = W2 h + b2
//! ```
//!
//! All parameters live in one flat `f64` vector; gradients are computed by a
//! hand-written backward pass and checked against finite differences in the
//! test suite.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::record::sha256_hex;
use crate::rng::StreamRng;
use crate::types::{prompt_codec, TokenGrid, VocabSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub prompt_vocab: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    prompt_emb: usize,
    token_emb: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
    input_dim: usize,
}

impl Architecture {
    pub fn for_vocab(vocab: &VocabSpec, window: usize, embed_dim: usize, hidden_dim: usize) -> Self {
        Architecture {
            vocab_size: vocab.vocab_size(),
            seq_len: vocab.seq_len(),
            prompt_len: prompt_codec::LEN,
            prompt_vocab: prompt_codec::VOCAB,
            window,
            embed_dim,
            hidden_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len == 0 || self.prompt_len == 0 || self.prompt_vocab < 2 {
            return Err(invalid("degenerate architecture"));
        }
        if self.window == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(invalid("window, embed_dim and hidden_dim must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let input_dim = self.prompt_len * d + self.window * d + self.seq_len;
        let prompt_emb = 0;
        let token_emb = prompt_emb + self.prompt_vocab * d;
        let w1 = token_emb + (self.vocab_size + 1) * d;
        let b1 = w1 + h * input_dim;
        let w2 = b1 + h;
        let b2 = w2 + self.vocab_size * h;
        Layout {
            prompt_emb,
            token_emb,
            w1,
            b1,
            w2,
            b2,
            total: b2 + self.vocab_size,
            input_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Index of the start token used to pad the context window.
    fn start_token(&self) -> usize {
        self.vocab_size
    }
}

/// A flat parameter vector bound to its architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    arch: Architecture,
    theta: Vec<f64>,
}

impl PolicyParams {
    pub fn new(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::Shape {
                expected: arch.param_count(),
                actual: theta.len(),
            });
        }
        if let Some(i) = theta.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "parameters",
                index: i,
            });
        }
        Ok(PolicyParams { arch, theta })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        PolicyParams::new(arch, vec![0.0; arch.param_count()])
    }

    /// Uniform fan-in scaled initialization.
    pub fn init(arch: Architecture, scale: f64, rng: &mut StreamRng) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let mut theta = vec![0.0; l.total];
        let mut fill = |range: std::ops::Range<usize>, bound: f64| {
            for x in &mut theta[range] {
                *x = rng.gen_range(-bound..=bound);
            }
        };
        let active_inputs = ((arch.prompt_len + arch.window) * arch.embed_dim + 1) as f64;
        fill(l.prompt_emb..l.w1, scale);
        fill(l.w1..l.b1, scale * (3.0 / active_inputs).sqrt());
        fill(l.w2..l.b2, scale * (3.0 / arch.hidden_dim as f64).sqrt() * 0.1);
        PolicyParams::new(arch, theta)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Replaces the parameters; the new vector must match the architecture.
    pub fn set_theta(&mut self, theta: Vec<f64>) -> Result<()> {
        *self = PolicyParams::new(self.arch, theta)?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(&self.arch).expect("arch serializes");
        for x in &self.theta {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        sha256_hex(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnapshotRole {
    Old,
    Reference,
}

/// A frozen copy of the parameters acting as the sampling or reference
/// policy. Cloning shares the underlying vector.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    params: Arc<PolicyParams>,
    role: SnapshotRole,
}

impl PolicySnapshot {
    pub fn freeze(params: &PolicyParams, role: SnapshotRole) -> Self {
        PolicySnapshot {
            params: Arc::new(params.clone()),
            role,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn role(&self) -> SnapshotRole {
        self.role
    }

    pub fn digest(&self) -> String {
        self.params.digest()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            temperature: 1.0,
            top_k: 16,
            cfg_scale: 1.0,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature must be positive"));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(invalid(format!("top_k must be in 1..={vocab_size}")));
        }
        if !self.cfg_scale.is_finite() {
            return Err(invalid("cfg_scale must be finite"));
        }
        Ok(())
    }

    fn uses_guidance(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

// ---------------------------------------------------------------------------
// Forward / backward kernels
// ---------------------------------------------------------------------------

fn check_prompt(arch: &Architecture, prompt: &[usize]) -> Result<()> {
    if prompt.len() != arch.prompt_len {
        return Err(Error::Shape {
            expected: arch.prompt_len,
            actual: prompt.len(),
        });
    }
    if prompt.iter().any(|&p| p >= arch.prompt_vocab) {
        return Err(invalid("prompt token outside prompt vocabulary"));
    }
    Ok(())
}

/// `W1[:, prompt block] * x_prompt`, shared by every step of a sequence.
fn prompt_projection(arch: &Architecture, l: &Layout, theta: &[f64], prompt: &[usize]) -> Vec<f64> {
    let d = arch.embed_dim;
    let mut out = vec![0.0; arch.hidden_dim];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &theta[l.w1 + i * l.input_dim..];
        let mut acc = 0.0;
        for (slot, &p) in prompt.iter().enumerate() {
            let e = &theta[l.prompt_emb + p * d..l.prompt_emb + (p + 1) * d];
            let w = &row[slot * d..(slot + 1) * d];
            acc += w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
        }
        *o = acc;
    }
    out
}

/// Context window for step `j`: most recent token first, start-padded.
fn window_tokens(arch: &Architecture, prefix: &[usize], j: usize) -> Vec<usize> {
    (0..arch.window)
        .map(|k| if k < j { prefix[j - 1 - k] } else { arch.start_token() })
        .collect()
}

/// One step: returns (hidden, logits).
fn step_forward(
    arch: &Architecture,
    l: &Layout,
    theta: &[f64],
    proj: &[f64],
    window: &[usize],
    j: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = arch.embed_dim;
    let h = arch.hidden_dim;
    let base = arch.prompt_len * d;
    let pos = base + arch.window * d + j;
    let mut hidden = vec![0.0; h];
    for (i, hv) in hidden.iter_mut().enumerate() {
        let row = &theta[l.w1 + i * l.input_dim..l.w1 + (i + 1) * l.input_dim];
        let mut a = theta[l.b1 + i] + proj[i] + row[pos];
        for (k, &t) in window.iter().enumerate() {
            let e = &theta[l.token_emb + t * d..l.token_emb + (t + 1) * d];
            let w = &row[base + k * d..base + (k + 1) * d];
            a += w.iter().zip(e).map(|(x, y)| x * y).sum::<f64>();
        }
        *hv = a.tanh();
    }
    let mut logits = vec![0.0; arch.vocab_size];
    for (v, lv) in logits.iter_mut().enumerate() {
        let row = &theta[l.w2 + v * h..l.w2 + (v + 1) * h];
        *lv = theta[l.b2 + v] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
    }
    (hidden, logits)
}

/// Teacher-forced forward pass of one prompt over a token sequence.
struct PassCache {
    prompt: Vec<usize>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<Vec<f64>>,
}

fn forward_pass(arch: &Architecture, theta: &[f64], prompt: &[usize], tokens: &[usize]) -> PassCache {
    let l = arch.layout();
    let proj = prompt_projection(arch, &l, theta, prompt);
    let mut hidden = Vec::with_capacity(tokens.len());
    let mut logits = Vec::with_capacity(tokens.len());
    for j in 0..tokens.len() {
        let w = window_tokens(arch, tokens, j);
        let (hd, lg) = step_forward(arch, &l, theta, &proj, &w, j);
        hidden.push(hd);
        logits.push(lg);
    }
    PassCache {
        prompt: prompt.to_vec(),
        hidden,
        logits,
    }
}

/// Accumulates the gradient of `sum_j <dlogits_j, logits_j>` into `grad`.
fn backward_pass(
    arch: &Architecture,
    theta: &[f64],
    cache: &PassCache,
    tokens: &[usize],
    dlogits: &[Vec<f64>],
    grad: &mut [f64],
) {
    let l = arch.layout();
    let d = arch.embed_dim;
    let h = arch.hidden_dim;
    let base = arch.prompt_len * d;
    let mut da_sum = vec![0.0; h];
    let mut dh = vec![0.0; h];
    for j in 0..tokens.len() {
        let g = &dlogits[j];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let hidden = &cache.hidden[j];
        dh.iter_mut().for_each(|x| *x = 0.0);
        for (v, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            grad[l.b2 + v] += gv;
            let w_off = l.w2 + v * h;
            for i in 0..h {
                grad[w_off + i] += gv * hidden[i];
                dh[i] += gv * theta[w_off + i];
            }
        }
        let window = window_tokens(arch, tokens, j);
        let pos = base + arch.window * d + j;
        for i in 0..h {
            let da = dh[i] * (1.0 - hidden[i] * hidden[i]);
            if da == 0.0 {
                continue;
            }
            da_sum[i] += da;
            grad[l.b1 + i] += da;
            let row = l.w1 + i * l.input_dim;
            grad[row + pos] += da;
            for (k, &t) in window.iter().enumerate() {
                let e = l.token_emb + t * d;
                let w = row + base + k * d;
                for c in 0..d {
                    grad[w + c] += da * theta[e + c];
                    grad[e + c] += da * theta[w + c];
                }
            }
        }
    }
    for i in 0..h {
        let da = da_sum[i];
        if da == 0.0 {
            continue;
        }
        let row = l.w1 + i * l.input_dim;
        for (slot, &p) in cache.prompt.iter().enumerate() {
            let e = l.prompt_emb + p * d;
            let w = row + slot * d;
            for c in 0..d {
                grad[w + c] += da * theta[e + c];
                grad[e + c] += da * theta[w + c];
            }
        }
    }
}

/// Next-token logits for the conditional prompt.
pub fn logits(params: &PolicyParams, prompt: &[usize], prefix: &[usize]) -> Result<Vec<f64>> {
    let arch = params.arch();
    check_prompt(arch, prompt)?;
    if prefix.len() >= arch.seq_len {
        return Err(Error::Shape {
            expected: arch.seq_len - 1,
            actual: prefix.len(),
        });
    }
    if prefix.iter().any(|&t| t >= arch.vocab_size) {
        return Err(invalid("prefix token outside vocabulary"));
    }
    let l = arch.layout();
    let proj = prompt_projection(arch, &l, params.theta(), prompt);
    let j = prefix.len();
    let w = window_tokens(arch, prefix, j);
    Ok(step_forward(arch, &l, params.theta(), &proj, &w, j).1)
}

/// `(1 - s) * uncond + s * cond`, i.e. `uncond + s * (cond - uncond)`.
/// Exact at `s = 1` (cond) and `s = 0` (uncond).
pub fn combine_guidance(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| (1.0 - scale) * u + scale * c)
        .collect()
}

pub fn cfg_logits(params: &PolicyParams, prompt: &[usize], prefix: &[usize], scale: f64) -> Result<Vec<f64>> {
    let cond = logits(params, prompt, prefix)?;
    if scale == 1.0 {
        return Ok(cond);
    }
    let uncond = logits(params, &prompt_codec::null_prompt(), prefix)?;
    Ok(combine_guidance(&cond, &uncond, scale))
}

/// The sampling distribution at one step after guidance, temperature and
/// top-k truncation.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    /// `z = guided_logits / temperature`
    pub scaled: Vec<f64>,
    pub in_top_k: Vec<bool>,
    lse_top_k: f64,
    lse_full: f64,
}

fn log_sum_exp<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl StepDistribution {
    pub fn new(guided: &[f64], settings: &SamplerSettings) -> Self {
        let scaled: Vec<f64> = guided.iter().map(|x| x / settings.temperature).collect();
        let mut order: Vec<usize> = (0..scaled.len()).collect();
        order.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        let mut in_top_k = vec![false; scaled.len()];
        for &i in order.iter().take(settings.top_k) {
            in_top_k[i] = true;
        }
        let lse_full = log_sum_exp(scaled.iter());
        let lse_top_k = if settings.top_k >= scaled.len() {
            lse_full
        } else {
            log_sum_exp(scaled.iter().zip(&in_top_k).filter(|(_, &k)| k).map(|(v, _)| v))
        };
        StepDistribution {
            scaled,
            in_top_k,
            lse_top_k,
            lse_full,
        }
    }

    /// Log-probability of `token`: truncated distribution when the token is
    /// inside the top-k set, the untruncated softmax otherwise.
    pub fn logprob(&self, token: usize) -> f64 {
        if self.in_top_k[token] {
            self.scaled[token] - self.lse_top_k
        } else {
            self.scaled[token] - self.lse_full
        }
    }

    /// Probabilities of the distribution `logprob(token)` was taken from.
    fn probs_for(&self, token: usize) -> Vec<f64> {
        if self.in_top_k[token] {
            self.truncated_probs()
        } else {
            self.scaled.iter().map(|z| (z - self.lse_full).exp()).collect()
        }
    }

    pub fn truncated_probs(&self) -> Vec<f64> {
        self.scaled
            .iter()
            .zip(&self.in_top_k)
            .map(|(z, &k)| if k { (z - self.lse_top_k).exp() } else { 0.0 })
            .collect()
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        let probs = self.truncated_probs();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// A grid sampled from a snapshot with the per-token log-probabilities of the
/// sampling distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub grid: TokenGrid,
    pub logprob_old: Vec<f64>,
}

pub fn sample_sequence(
    snapshot: &PolicySnapshot,
    prompt: &[usize],
    vocab: &VocabSpec,
    settings: &SamplerSettings,
    rng: &mut StreamRng,
) -> Result<SampledSequence> {
    let params = snapshot.params();
    let arch = params.arch();
    check_prompt(arch, prompt)?;
    settings.validate(arch.vocab_size)?;
    if arch.seq_len != vocab.seq_len() || arch.vocab_size != vocab.vocab_size() {
        return Err(invalid("policy architecture does not match vocabulary"));
    }
    let l = arch.layout();
    let theta = params.theta();
    let proj = prompt_projection(arch, &l, theta, prompt);
    let null_proj = settings
        .uses_guidance()
        .then(|| prompt_projection(arch, &l, theta, &prompt_codec::null_prompt()));
    let mut tokens = Vec::with_capacity(arch.seq_len);
    let mut logprob_old = Vec::with_capacity(arch.seq_len);
    for j in 0..arch.seq_len {
        let w = window_tokens(arch, &tokens, j);
        let (_, cond) = step_forward(arch, &l, theta, &proj, &w, j);
        let guided = match &null_proj {
            Some(np) => {
                let (_, uncond) = step_forward(arch, &l, theta, np, &w, j);
                combine_guidance(&cond, &uncond, settings.cfg_scale)
            }
            None => cond,
        };
        let dist = StepDistribution::new(&guided, settings);
        let t = dist.sample(rng);
        logprob_old.push(dist.logprob(t));
        tokens.push(t);
    }
    Ok(SampledSequence {
        grid: TokenGrid::new(vocab, tokens)?,
        logprob_old,
    })
}

/// Teacher-forced evaluation of a grid, retaining what the backward pass
/// needs.
pub struct SequenceEval {
    tokens: Vec<usize>,
    cond: PassCache,
    uncond: Option<PassCache>,
    dists: Vec<StepDistribution>,
    pub per_token: Vec<f64>,
    settings: SamplerSettings,
}

impl SequenceEval {
    pub fn total(&self) -> f64 {
        self.per_token.iter().sum()
    }

    /// Adds `d/dtheta sum_j weights[j] * logprob_j` into `grad`.
    pub fn backward(&self, params: &PolicyParams, weights: &[f64], grad: &mut [f64]) {
        let arch = params.arch();
        let theta = params.theta();
        let s = self.settings.cfg_scale;
        let inv_t = 1.0 / self.settings.temperature;
        let mut d_cond = Vec::with_capacity(self.tokens.len());
        let mut d_uncond = Vec::with_capacity(self.tokens.len());
        for (j, dist) in self.dists.iter().enumerate() {
            let w = weights[j];
            if w == 0.0 {
                d_cond.push(vec![0.0; arch.vocab_size]);
                d_uncond.push(vec![0.0; arch.vocab_size]);
                continue;
            }
            let y = self.tokens[j];
            let probs = dist.probs_for(y);
            let dz: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(v, p)| w * inv_t * (f64::from(u8::from(v == y)) - p))
                .collect();
            if self.uncond.is_some() {
                d_cond.push(dz.iter().map(|g| g * s).collect());
                d_uncond.push(dz.iter().map(|g| g * (1.0 - s)).collect());
            } else {
                d_cond.push(dz);
            }
        }
        backward_pass(arch, theta, &self.cond, &self.tokens, &d_cond, grad);
        if let Some(u) = &self.uncond {
            backward_pass(arch, theta, u, &self.tokens, &d_uncond, grad);
        }
    }
}

pub fn evaluate_sequence(
    params: &PolicyParams,
    prompt: &[usize],
    tokens: &[usize],
    settings: &SamplerSettings,
) -> Result<SequenceEval> {
    let arch = params.arch();
    check_prompt(arch, prompt)?;
    settings.validate(arch.vocab_size)?;
    if tokens.len() != arch.seq_len {
        return Err(Error::Shape {
            expected: arch.seq_len,
            actual: tokens.len(),
        });
    }
    if tokens.iter().any(|&t| t >= arch.vocab_size) {
        return Err(invalid("grid token outside vocabulary"));
    }
    let theta = params.theta();
    let cond = forward_pass(arch, theta, prompt, tokens);
    let uncond = settings
        .uses_guidance()
        .then(|| forward_pass(arch, theta, &prompt_codec::null_prompt(), tokens));
    let mut dists = Vec::with_capacity(tokens.len());
    let mut per_token = Vec::with_capacity(tokens.len());
    for j in 0..tokens.len() {
        let guided = match &uncond {
            Some(u) => combine_guidance(&cond.logits[j], &u.logits[j], settings.cfg_scale),
            None => cond.logits[j].clone(),
        };
        let dist = StepDistribution::new(&guided, settings);
        per_token.push(dist.logprob(tokens[j]));
        dists.push(dist);
    }
    Ok(SequenceEval {
        tokens: tokens.to_vec(),
        cond,
        uncond,
        dists,
        per_token,
        settings: *settings,
    })
}

/// `(sum, per-token)` log-probabilities of `grid` under the sampler
/// transform, using the untruncated softmax for tokens outside the top-k.
pub fn sequence_logprob(
    params: &PolicyParams,
    prompt: &[usize],
    grid: &TokenGrid,
    settings: &SamplerSettings,
) -> Result<(f64, Vec<f64>)> {
    let eval = evaluate_sequence(params, prompt, grid.tokens(), settings)?;
    Ok((eval.total(), eval.per_token))
}

/// A scalar function of the parameters with an analytic gradient.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value(&self, theta: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Analytic gradient, rejected if any coordinate is non-finite.
pub fn grad_objective(theta: &[f64], objective: &dyn Objective) -> Result<Vec<f64>> {
    if theta.len() != objective.dim() {
        return Err(Error::Shape {
            expected: objective.dim(),
            actual: theta.len(),
        });
    }
    let (_, grad) = objective.value_and_grad(theta)?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index: i,
        });
    }
    Ok(grad)
}
