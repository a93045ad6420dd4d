//! Hadamard-product linear attention (HPSA) with a dense positive kernel and
//! multi-kernel value interaction, plus a small recurrent stereo matcher built
//! on top of it.
//!
//! All arithmetic is `f64`. Differentiation runs on a dynamically recorded
//! [`graph::Graph`]; every op's adjoint is checked against finite differences
//! in [`gradcheck`].

pub mod attention;
pub mod bench;
pub mod cli;
pub mod config;
pub mod correlation;
pub mod data;
pub mod disparity;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod param;
pub mod refine;
pub mod suite;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) mod testutil;

/// Deterministic, platform-stable generator used for every seeded draw.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
