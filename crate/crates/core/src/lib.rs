//! Pair-GRPO for autoregressive token-grid generation.
//!
//! A small conditional autoregressive policy generates `H x W` grids of
//! discrete tokens from structured prompts. A question-based oracle scores
//! prompt/grid consistency, and group-relative policy optimization over
//! paired prompts (optionally with injected ground-truth grids) trains the
//! policy. [`eval`] measures arithmetic and geometric mean consistency over
//! held-out prompt pairs.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod optim;
pub mod policy;
pub mod record;
pub mod reward;
pub mod rng;
pub mod train;
pub mod types;
pub mod world;

pub use error::{Error, Result};
pub use types::{
    Category, Color, ObjectSpec, PairedRecord, PromptSpec, Relation, RelationKind, Shape, TokenGrid, VocabSpec,
};
