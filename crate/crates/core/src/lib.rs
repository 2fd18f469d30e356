//! Posterior-sampling self-play for episodic two-player zero-sum Markov games.
//!
//! The crate is organised bottom-up:
//!
//! - [`game`]: the tabular game model, Markov policies, episode sampling and
//!   exact occupancy / policy-value recursions.
//! - [`matrix`]: an exact simplex solver for zero-sum matrix games.
//! - [`oracle`]: Nash values, best responses and the two Bellman operators.
//! - [`class`]: finite hypothesis classes, induced policies, closure building
//!   and the prior-mass complexity `kappa`.
//! - [`posterior`]: loss ledgers and exact chain-structured posteriors for the
//!   main (max-player) and booster (min-player) agents.
//! - [`selfplay`]: the learning loop and exact regret evaluation.
//! - [`diagnostics`]: Bellman residuals, value-decomposition checks, excess-loss
//!   moments, the decoupling certificate and the elliptical potential sandwich.
//! - [`instances`]: seeded generators for tabular and linear games.
//! - [`harness`]: the experiment runner behind the `mglab` binary.

// Negated comparisons are used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod class;
pub mod diagnostics;
mod error;
pub mod exec;
pub mod format;
pub mod game;
pub mod harness;
pub mod instances;
pub mod matrix;
pub mod oracle;
pub mod posterior;
pub mod selfplay;

pub use error::{Error, Result};
pub use exec::Execution;
