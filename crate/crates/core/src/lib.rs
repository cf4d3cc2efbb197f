//! Generative few-shot cross-domain adaptation in feature space.
//!
//! A labeled source domain with a handful of extremely under-sampled
//! ("few-shot") classes is adapted to an unlabeled target domain. Three
//! pieces cooperate:
//!
//! - a conditional feature generator / discriminator pair that synthesizes
//!   labeled feature vectors to augment the few-shot classes ([`gan`]),
//! - a multi-kernel MMD alignment loss between encoded source and target
//!   batches ([`mkmmd`]),
//! - a fair-classification regularizer that pins the mean squared
//!   classifier weight norm of the few-shot classes to the normal-class
//!   average ([`adapt`]).
//!
//! Everything is trained with hand-derived reverse-mode gradients
//! ([`autograd`]) and a from-scratch Adam, under a deterministic seeded
//! schedule ([`trainer`]). Metrics and diagnostics live in [`eval`].
//!
//! Core math is generic over the scalar type via [`scalar::Scalar`]
//! (`f32` or `f64`); the training pipeline itself is pinned to `f64`
//! through the [`Mat`] alias.

pub mod adapt;
pub mod autograd;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod gan;
pub mod gradcheck;
pub mod graphs;
pub mod mkmmd;
pub mod numerics;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::matrix::Matrix;
pub use numerics::rng::RngState;
pub use scalar::Scalar;

/// Double-precision matrix, the concrete type used by the training pipeline.
pub type Mat = Matrix<f64>;
/// Single-precision matrix alias for callers that want it.
pub type Mat32 = Matrix<f32>;
