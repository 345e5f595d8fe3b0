//! Dataset distillation with protected-attribute fairness.
//!
//! The crate condenses bias-injected image datasets into a handful of
//! synthetic images per class, either with the vanilla class-level matching
//! objective or with synchronized per-group matching, and then measures the
//! equalized-odds gaps of classifiers trained on the condensed sets. It also
//! verifies the closed-form fixed points and the upper-bound relation between
//! the two objectives numerically.
//!
//! Modules, bottom up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: a small reverse-mode engine.
//! - [`data`]: procedural biased datasets, group partitions, file formats.
//! - [`models`]: randomly initialised extractors and classifiers.
//! - [`matching`]: distribution/gradient matching objectives and weightings.
//! - [`distill`]: the outer pixel optimisation loop.
//! - [`fairness`]: classifier training and DEO metrics.
//! - [`verify`]: embedding-space oracles for the analytic claims.
//! - [`experiment`]: experiment matrices, artifacts and report rendering.

pub mod data;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod fairness;
pub mod gradcheck;
mod kernels;
pub mod matching;
pub mod models;
mod rng;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result, TensorError};
pub use gradcheck::finite_diff_check;
pub use tape::{forward_op, Gradients, OpKind, Tape, Var};
pub use tensor::{sgd_update, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/fixed-points.md")]
    mod fixed_points {}
    #[doc = include_str!("../../../book/src/fairness.md")]
    mod fairness {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
