//! Exact robustness certification for min-max affine models.
//!
//! A model `g(x) = min_i max_j (a_ij . x + b_ij)` is certified over a convex
//! attack set `X` by solving a pair of convex programs (a primal over
//! weighted atoms and its conic dual) whose common optimal value is
//! `inf_{x in X} g(x)`. The primal solution also yields an optimal attack.

pub mod attack_set;
pub mod certify;
pub mod classify;
pub mod conic;
pub mod control;
pub mod convert;
pub mod datasets;
pub mod error;
pub mod json;
pub mod model;
pub mod train;

pub use attack_set::{AttackSet, ConstraintFn, ExtReal, Norm};
pub use error::{Error, Result};
pub use model::{AffinePiece, EvalTrace, MinMaxModel};
