//! Inverse entropy-regularized reinforcement learning on finite MDPs.
//!
//! The pipeline: solve the soft Bellman equations for an expert
//! ([`mdp`]), simulate demonstrations as a stationary Markov chain
//! ([`chain`]), estimate the expert policy by penalized maximum likelihood
//! ([`fit`]), and recover the unique least-squares reward from the estimated
//! policy ([`reward`]). [`metrics`] and [`checks`] tie the outputs to error
//! functionals and inequality suites; [`harness`] drives configurable sweeps.

// `!(x >= 0.0)` rejects NaN along with negatives.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod chain;
pub mod checks;
pub mod error;
pub mod exec;
pub mod fit;
pub mod garnet;
pub mod harness;
pub mod mdp;
pub mod metrics;
pub mod numeric;
pub mod reward;

pub use error::{Error, Result};
