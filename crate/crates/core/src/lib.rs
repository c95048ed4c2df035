//! Closed-form decision layers for neural classifiers.
//!
//! The crate computes the decision-layer weights of a classifier directly
//! from the Gram matrix of its features instead of training them, either as
//! the least-squares stationary point `w_i = (YY')^-1 M_i` or as the solution
//! of the sphere-constrained maximization of the correct-class decision
//! values. The constrained maximum `Z` then serves as the training objective
//! for the pre-decision tanh layers, which are updated with a linearized
//! backpropagation rule.
//!
//! Module map:
//!
//! * [`dataset`]: labeled feature matrices, CSV loading, synthetic clusters,
//!   class-sum vectors `M_i`.
//! * [`gram`]: `YY'`, its SPD factorization and regularized inverse, trace
//!   bound and learnability verdict.
//! * [`decision`]: predictions, losses and gradients, computed weights and
//!   the Lagrangian solution.
//! * [`dynamics`]: plain and preconditioned gradient descent on the decision
//!   layer, closed-form trajectories, regime classification.
//! * [`network`]: the tanh layer stack, exact gradient of `Z`, linearized
//!   backpropagation and its training loop.
//! * [`runner`]: experiment configuration, scenarios, trajectory and model
//!   files.

pub mod dataset;
pub mod decision;
pub mod dynamics;
pub mod error;
pub mod gram;
pub mod network;
pub mod runner;

pub use error::{CrestError, Result};

/// Dense column-major matrix used throughout the crate.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense column vector.
pub type Vector = nalgebra::DVector<f64>;
