//! Question-based consistency reward.
//!
//! A prompt is decomposed into yes/no style questions, each question is
//! answered against the grid with a score in `[0, 1]`, and the reward is the
//! unweighted mean. Decomposition table, per object:
//!
//! | object            | questions                                   |
//! |-------------------|---------------------------------------------|
//! | count = 1         | `existence(shape)`, `color_of(shape)=color` |
//! | count = n > 1     | `existence(shape)`, `count_of(color shape)=n` |
//!
//! plus one `relation` question per relation.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{ObjectSpec, PromptSpec, RelationKind, Shape, TokenDef, TokenGrid, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "question")]
pub enum Question {
    /// Is there any object of this shape?
    Existence { object: usize, shape: Shape },
    /// Is the (unique) object of this shape the stated color? Scored 1 only
    /// when exactly one matching token is present.
    ColorOf { object: usize, target: ObjectSpec },
    /// Are there exactly `target.count` matching tokens?
    CountOf { object: usize, target: ObjectSpec },
    Relation {
        subject: usize,
        subject_target: ObjectSpec,
        kind: RelationKind,
        object: usize,
        object_target: ObjectSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub per_question: Vec<(Question, f64)>,
    pub total: f64,
}

pub fn decompose(spec: &PromptSpec) -> Vec<Question> {
    let mut out = Vec::new();
    for (i, o) in spec.objects().iter().enumerate() {
        out.push(Question::Existence {
            object: i,
            shape: o.shape,
        });
        if o.count == 1 {
            out.push(Question::ColorOf { object: i, target: *o });
        } else {
            out.push(Question::CountOf { object: i, target: *o });
        }
    }
    for r in spec.relations() {
        out.push(Question::Relation {
            subject: r.subject,
            subject_target: spec.objects()[r.subject],
            kind: r.kind,
            object: r.object,
            object_target: spec.objects()[r.object],
        });
    }
    out
}

fn matching_cells(grid: &TokenGrid, vocab: &VocabSpec, target: &ObjectSpec) -> Vec<(usize, usize)> {
    match vocab.token_of(target.shape, target.color) {
        Some(t) => grid.cells_with(t),
        None => Vec::new(),
    }
}

pub fn answer(q: &Question, grid: &TokenGrid, vocab: &VocabSpec) -> f64 {
    match q {
        Question::Existence { shape, .. } => {
            let present = grid
                .tokens()
                .iter()
                .any(|&t| matches!(vocab.token_def(t), Some(TokenDef::Object { shape: s, .. }) if s == *shape));
            if present {
                1.0
            } else {
                0.0
            }
        }
        Question::ColorOf { target, .. } => {
            if matching_cells(grid, vocab, target).len() == 1 {
                1.0
            } else {
                0.0
            }
        }
        Question::CountOf { target, .. } => {
            let actual = matching_cells(grid, vocab, target).len() as f64;
            let expected = f64::from(target.count);
            (1.0 - (actual - expected).abs() / expected).max(0.0)
        }
        Question::Relation {
            subject_target,
            kind,
            object_target,
            ..
        } => {
            let subjects = matching_cells(grid, vocab, subject_target);
            let objects = matching_cells(grid, vocab, object_target);
            if subjects.is_empty() || objects.is_empty() {
                return 0.0;
            }
            if subjects.len() > subject_target.count as usize || objects.len() > object_target.count as usize {
                return 0.5;
            }
            let all = subjects.iter().all(|&s| objects.iter().all(|&o| kind.holds(s, o)));
            if all {
                1.0
            } else {
                0.0
            }
        }
    }
}

pub fn reward(spec: &PromptSpec, grid: &TokenGrid, vocab: &VocabSpec) -> RewardBreakdown {
    let per_question: Vec<(Question, f64)> = decompose(spec)
        .into_iter()
        .map(|q| {
            let s = answer(&q, grid, vocab);
            (q, s)
        })
        .collect();
    let total = per_question.iter().map(|(_, s)| s).sum::<f64>() / per_question.len() as f64;
    RewardBreakdown { per_question, total }
}

/// Anything that can score a grid against a prompt.
pub trait RewardScorer: Send + Sync {
    /// `key` identifies the scoring event; it seeds noise where applicable.
    fn score(&self, spec: &PromptSpec, grid: &TokenGrid, key: u64) -> Result<f64>;
}

/// The local programmatic judge, optionally with seeded additive noise.
#[derive(Debug, Clone)]
pub struct OracleReward {
    vocab: VocabSpec,
    noise_delta: f64,
    seed: u64,
}

impl OracleReward {
    pub fn new(vocab: VocabSpec) -> Self {
        OracleReward {
            vocab,
            noise_delta: 0.0,
            seed: 0,
        }
    }

    /// Uniform `±delta` noise, clamped to `[0, 1]`.
    pub fn with_noise(mut self, delta: f64, seed: u64) -> Self {
        self.noise_delta = delta;
        self.seed = seed;
        self
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }
}

impl RewardScorer for OracleReward {
    fn score(&self, spec: &PromptSpec, grid: &TokenGrid, key: u64) -> Result<f64> {
        let total = reward(spec, grid, &self.vocab).total;
        if self.noise_delta <= 0.0 {
            return Ok(total);
        }
        let mut r = rng::stream(self.seed, "reward-noise", &[key]);
        let noise = r.gen_range(-self.noise_delta..=self.noise_delta);
        Ok((total + noise).clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteRequest {
    pub id: u64,
    pub prompt_text: String,
    pub grid: Vec<usize>,
    pub vocab_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub id: u64,
    #[serde(default)]
    pub score: Option<f64>,
    /// HTTP-style status; absent means success.
    #[serde(default)]
    pub status: Option<u16>,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RemoteSettings {
    pub endpoint: String,
    /// Retries after the first failed attempt.
    pub retry_budget: u32,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteSettings {
    fn default() -> Self {
        RemoteSettings {
            endpoint: String::new(),
            retry_budget: 3,
            timeout_ms: 5_000,
            max_in_flight: 8,
        }
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

/// Client for an external judge speaking the line-delimited JSON protocol:
/// one request line, one response line per connection.
pub struct RemoteReward {
    settings: RemoteSettings,
    vocab_digest: String,
    next_id: AtomicU64,
    slots: Mutex<usize>,
    freed: Condvar,
}

impl RemoteReward {
    pub fn new(settings: RemoteSettings, vocab: &VocabSpec) -> Result<Self> {
        if settings.endpoint.is_empty() {
            return Err(Error::Remote("no endpoint configured".into()));
        }
        if settings.max_in_flight == 0 {
            return Err(Error::Remote("max_in_flight must be positive".into()));
        }
        Ok(RemoteReward {
            slots: Mutex::new(settings.max_in_flight),
            settings,
            vocab_digest: vocab.digest(),
            next_id: AtomicU64::new(1),
            freed: Condvar::new(),
        })
    }

    fn acquire(&self) {
        let mut free = self.slots.lock().expect("slot lock");
        while *free == 0 {
            free = self.freed.wait(free).expect("slot lock");
        }
        *free -= 1;
    }

    fn release(&self) {
        *self.slots.lock().expect("slot lock") += 1;
        self.freed.notify_one();
    }

    /// Scores one grid remotely; transport failures and non-2xx statuses are
    /// retried up to the budget, malformed or out-of-range answers are not.
    pub fn request(&self, prompt_text: &str, grid: &[usize]) -> Result<f64> {
        let req = RemoteRequest {
            id: self.next_id.fetch_add(1, Ordering::Relaxed),
            prompt_text: prompt_text.to_string(),
            grid: grid.to_vec(),
            vocab_digest: self.vocab_digest.clone(),
        };
        let line = serde_json::to_string(&req)?;
        self.acquire();
        let mut last = String::new();
        let mut outcome = None;
        for _ in 0..=self.settings.retry_budget {
            match self.attempt(&line, req.id) {
                Ok(score) => {
                    outcome = Some(Ok(score));
                    break;
                }
                Err(Attempt::Fatal(e)) => {
                    outcome = Some(Err(e));
                    break;
                }
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        self.release();
        outcome.unwrap_or_else(|| {
            Err(Error::Remote(format!(
                "gave up after {} attempts: {last}",
                self.settings.retry_budget + 1
            )))
        })
    }

    fn attempt(&self, line: &str, id: u64) -> std::result::Result<f64, Attempt> {
        let timeout = Duration::from_millis(self.settings.timeout_ms);
        let addr = self
            .settings
            .endpoint
            .to_socket_addrs()
            .map_err(|e| Attempt::Fatal(Error::Remote(format!("bad endpoint: {e}"))))?
            .next()
            .ok_or_else(|| Attempt::Fatal(Error::Remote("endpoint resolves to nothing".into())))?;
        let transport = |e: std::io::Error| Attempt::Retry(e.to_string());
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(transport)?;
        stream.set_read_timeout(Some(timeout)).map_err(transport)?;
        stream.set_write_timeout(Some(timeout)).map_err(transport)?;
        stream.write_all(line.as_bytes()).map_err(transport)?;
        stream.write_all(b"\n").map_err(transport)?;
        let mut reader = BufReader::new(stream);
        let mut buf = String::new();
        let n = reader.read_line(&mut buf).map_err(transport)?;
        if n == 0 {
            return Err(Attempt::Retry("connection closed without response".into()));
        }
        let resp: RemoteResponse = serde_json::from_str(buf.trim())
            .map_err(|e| Attempt::Fatal(Error::Remote(format!("malformed response: {e}"))))?;
        if let Some(status) = resp.status {
            if !(200..300).contains(&status) {
                return Err(Attempt::Retry(format!(
                    "status {status}: {}",
                    resp.error.unwrap_or_default()
                )));
            }
        }
        if resp.id != id {
            return Err(Attempt::Fatal(Error::Remote(format!(
                "response id {} does not match request {id}",
                resp.id
            ))));
        }
        let score = resp
            .score
            .ok_or_else(|| Attempt::Fatal(Error::Remote("response carries no score".into())))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(Attempt::Fatal(Error::Validation(format!(
                "remote score {score} outside [0, 1]"
            ))));
        }
        Ok(score)
    }
}

impl RewardScorer for RemoteReward {
    fn score(&self, spec: &PromptSpec, grid: &TokenGrid, _key: u64) -> Result<f64> {
        self.request(spec.surface_text(), grid.tokens())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Category, Color, Relation};

    fn vocab() -> VocabSpec {
        VocabSpec::default()
    }

    type Placement = ((usize, usize), (Shape, Color));

    fn grid_with(cells: &[Placement]) -> TokenGrid {
        let v = vocab();
        let mut tokens = vec![0; v.seq_len()];
        for &((r, c), (s, col)) in cells {
            tokens[v.grid_index(r, c).unwrap()] = v.token_of(s, col).unwrap();
        }
        TokenGrid::new(&v, tokens).unwrap()
    }

    fn triangles_left_of_square() -> PromptSpec {
        PromptSpec::new(
            vec![
                ObjectSpec::new(Shape::Triangle, Color::Green, 2),
                ObjectSpec::new(Shape::Square, Color::Blue, 1),
            ],
            vec![Relation {
                subject: 0,
                kind: RelationKind::LeftOf,
                object: 1,
            }],
            Category::Position,
        )
        .unwrap()
    }

    #[test]
    fn decompose_single_object() {
        let spec = PromptSpec::new(
            vec![ObjectSpec::new(Shape::Circle, Color::Red, 1)],
            vec![],
            Category::Color,
        )
        .unwrap();
        let qs = decompose(&spec);
        assert_eq!(
            qs,
            vec![
                Question::Existence {
                    object: 0,
                    shape: Shape::Circle
                },
                Question::ColorOf {
                    object: 0,
                    target: ObjectSpec::new(Shape::Circle, Color::Red, 1)
                },
            ]
        );
    }

    #[test]
    fn decompose_counted_with_relation() {
        let qs = decompose(&triangles_left_of_square());
        assert_eq!(qs.len(), 5);
        assert!(matches!(
            qs[0],
            Question::Existence {
                shape: Shape::Triangle,
                ..
            }
        ));
        assert!(matches!(qs[1], Question::CountOf { target, .. } if target.count == 2));
        assert!(matches!(
            qs[2],
            Question::Existence {
                shape: Shape::Square,
                ..
            }
        ));
        assert!(matches!(qs[3], Question::ColorOf { target, .. } if target.color == Color::Blue));
        assert!(matches!(
            qs[4],
            Question::Relation {
                kind: RelationKind::LeftOf,
                ..
            }
        ));
    }

    #[test]
    fn count_partial_credit() {
        let q = Question::CountOf {
            object: 0,
            target: ObjectSpec::new(Shape::Triangle, Color::Green, 2),
        };
        let tri = (Shape::Triangle, Color::Green);
        assert_eq!(answer(&q, &grid_with(&[((0, 0), tri), ((1, 1), tri)]), &vocab()), 1.0);
        assert_eq!(answer(&q, &grid_with(&[((0, 0), tri)]), &vocab()), 0.5);
        assert_eq!(answer(&q, &grid_with(&[]), &vocab()), 0.0);
        let five: Vec<_> = (0..4).map(|c| ((0, c), tri)).chain([((1, 0), tri)]).collect();
        assert_eq!(answer(&q, &grid_with(&five), &vocab()), 0.0);
    }

    #[test]
    fn relation_scores() {
        let spec = PromptSpec::new(
            vec![
                ObjectSpec::new(Shape::Circle, Color::Red, 1),
                ObjectSpec::new(Shape::Square, Color::Blue, 1),
            ],
            vec![Relation {
                subject: 0,
                kind: RelationKind::LeftOf,
                object: 1,
            }],
            Category::Position,
        )
        .unwrap();
        let q = decompose(&spec).pop().unwrap();
        let rc = (Shape::Circle, Color::Red);
        let bs = (Shape::Square, Color::Blue);
        assert_eq!(answer(&q, &grid_with(&[((2, 1), rc), ((0, 3), bs)]), &vocab()), 1.0);
        assert_eq!(answer(&q, &grid_with(&[((2, 3), rc), ((0, 1), bs)]), &vocab()), 0.0);
        assert_eq!(answer(&q, &grid_with(&[((2, 3), rc), ((0, 3), bs)]), &vocab()), 0.0);
        // two red circles: the referenced subject is ambiguous
        assert_eq!(
            answer(&q, &grid_with(&[((0, 0), rc), ((1, 0), rc), ((0, 3), bs)]), &vocab()),
            0.5
        );
        assert_eq!(answer(&q, &grid_with(&[((0, 3), bs)]), &vocab()), 0.0);
    }

    #[test]
    fn background_scores_low() {
        let spec = triangles_left_of_square();
        let r = reward(&spec, &TokenGrid::background(&vocab()), &vocab());
        assert!(r.total < 0.5);
        for (q, s) in &r.per_question {
            if matches!(q, Question::Existence { .. }) {
                assert_eq!(*s, 0.0);
            }
        }
    }

    #[test]
    fn exact_scene_scores_one() {
        let spec = triangles_left_of_square();
        let tri = (Shape::Triangle, Color::Green);
        let g = grid_with(&[((0, 0), tri), ((3, 1), tri), ((2, 2), (Shape::Square, Color::Blue))]);
        assert_eq!(reward(&spec, &g, &vocab()).total, 1.0);
    }

    #[test]
    fn noise_is_seeded_and_clamped() {
        let spec = triangles_left_of_square();
        let g = TokenGrid::background(&vocab());
        let noisy = OracleReward::new(vocab()).with_noise(0.3, 11);
        let a = noisy.score(&spec, &g, 5).unwrap();
        assert_eq!(a, noisy.score(&spec, &g, 5).unwrap());
        for key in 0..200 {
            let s = noisy.score(&spec, &g, key).unwrap();
            assert!((0.0..=1.0).contains(&s));
        }
        let exact = OracleReward::new(vocab());
        assert_eq!(exact.score(&spec, &g, 5).unwrap(), reward(&spec, &g, &vocab()).total);
    }
}
