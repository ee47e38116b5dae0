//! Speech anti-spoofing countermeasure toolkit.
//!
//! The crate covers the whole pipeline: LFCC features ([`frontend`]), a
//! ResNet-18 / SE-ResNet-18 embedding network with attentive statistics
//! pooling ([`model`]) built on a small reverse-mode autodiff engine
//! ([`numerics`]), ReLU-family and attentive (AReLU) activations plus their
//! summation ensembles ([`activations`]), one-class softmax training
//! ([`training`]) and EER / min-tDCF / DET / score fusion
//! ([`evaluation`]).

pub mod activations;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};

/// Seeded generator used for every random draw in the crate.
pub type SeedRng = rand_chacha::ChaCha8Rng;

/// Builds a [`SeedRng`] from a 64-bit seed.
pub fn seed_rng(seed: u64) -> SeedRng {
    use rand::SeedableRng;
    SeedRng::seed_from_u64(seed)
}
