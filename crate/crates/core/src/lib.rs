//! Equilibrium strategies for time-inconsistent mean-variance optimal stopping.
//!
//! The crate solves the entropy-regularized coupled extended-HJB system for a
//! one-dimensional diffusion, drives the regularization to zero, solves the
//! limiting variational-inequality system directly, and cross-checks the
//! results against a discrete-time stopping game, Monte-Carlo simulation of
//! Cox-process randomized stopping, and the closed-form infinite-horizon
//! geometric Brownian motion benchmark.
//!
//! Module map:
//!
//! - [`model`]: coefficients, rewards, problem parameters and grids.
//! - [`pde_kernel`]: generator, implicit backward stepper, linear solves.
//! - [`hjb_regularized`]: the regularized coupled system and its equilibrium intensity.
//! - [`vi_limit`]: vanishing-regularization ladder, projected VI solver, free boundary.
//! - [`discrete_game`]: backward recursion of the discrete-time stopping game.
//! - [`simulate`]: Euler-Maruyama paths, Cox stopping, objective estimators.
//! - [`verify`]: first-order perturbation certificates.
//! - [`gbm_benchmark`]: closed-form GBM oracle.
//! - [`cli`]: config-driven batch front end behind the `mvstop` binary.

// Stencil loops index several arrays at once, and `!(x > 0.0)` is the
// NaN-rejecting form used for input checks.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod cli;
pub mod discrete_game;
pub mod error;
pub mod field;
pub mod gbm_benchmark;
pub mod hjb_regularized;
pub mod model;
pub mod parallel;
pub mod pde_kernel;
pub mod simulate;
pub mod verify;
pub mod vi_limit;

pub use error::{Error, Result};
pub use field::GridField;
pub use model::{BoundaryKind, CoefficientSpec, Grid, ProblemSpec, VarianceFactor};
