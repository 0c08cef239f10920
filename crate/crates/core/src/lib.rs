//! Multi-view semantic decomposition and partial alignment for
//! document-based zero-shot learning.
//!
//! Pre-extracted image patch features and per-class word-embedding documents
//! are mapped into a shared space by two perceivers, decomposed into `k`
//! view embeddings by attention-aggregation blocks, and aligned with a
//! smooth-chamfer set similarity. Unseen classes are scored with a partial
//! (top-`p`) variant of the same similarity.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line
//! live in the `emdepart` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod alignment;
pub mod config;
pub mod data;
mod error;
pub mod inference;
pub(crate) mod math;
pub mod model;
pub mod numerics;
pub mod perceivers;
pub mod sdm;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{ParamId, ParamStore, Parameter, Tape, Tensor, Var};

/// Deterministic generator used for initialization, shuffling and dropout.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeds the crate-wide generator.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
