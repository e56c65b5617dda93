//! Distributional actor-critic for cost-constrained control problems.
//!
//! The crate trains a tanh-squashed Gaussian policy against quantile return
//! distributions. Cost constraints are expressed as mean-std bounds on the
//! discounted cost return, policy updates solve a KL trust-region subproblem
//! in dual space, and infeasible iterates are repaired by a gradient
//! integration step that combines all constraint gradients in one quadratic
//! program.

pub mod critic;
pub mod envs;
pub mod error;
pub mod gradinteg;
pub mod numgrad;
pub mod oracles;
pub mod policy;
pub mod qdist;
pub mod tdtarget;
pub mod trsolver;
pub mod vecmath;

pub use error::{Error, Result};
