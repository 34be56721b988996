//! Meta-learned neural state-space models for reference-tracking MPC.
//!
//! A neural state-space model (NSSM) encodes a window of past inputs and
//! outputs into a latent state that evolves linearly. The crate meta-trains
//! such models over a family of source plants (implicit MAML, with MAML and
//! supervised baselines), adapts them to a data-scarce target plant, and runs
//! a convex tracking MPC on the lifted linear model.
//!
//! Module map:
//! - [`diff`]: flat parameter vectors and finite-difference oracles.
//! - [`nssm`]: the model, its loss, gradient and Hessian-vector product.
//! - [`plants`]: Van der Pol and pendulum simulators, datasets, scaling.
//! - [`meta`]: bilevel meta-training with conjugate-gradient implicit gradients.
//! - [`mpc`]: lifting, Riccati terminal cost, box QP, receding-horizon loop.
//! - [`experiments`]: configuration and the command implementations.

// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diff;
pub mod error;
pub mod experiments;
pub mod meta;
pub mod mpc;
pub mod nssm;
pub mod plants;
pub mod seed;

pub use error::{Error, Result};
