//! Bi-level label-quality optimization for weakly supervised learning.
//!
//! The library learns per-instance weights and a label transition quantity
//! for a weakly supervised training set by maximizing performance on a small
//! clean validation set while penalizing any regression against the model
//! trained on the raw labels (safeness). Hypergradients through the
//! lower-level learner come from two engines: implicit differentiation for
//! strictly convex training objectives and reverse-mode differentiation of a
//! recorded gradient-descent unroll for the general case, with a
//! finite-difference oracle for cross-checks.

pub mod cg;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod hypergrad;
pub mod lower_solver;
pub mod model;
pub mod pgs;
pub mod projection;
pub mod report;
pub mod types;

pub use error::{Error, Result};
