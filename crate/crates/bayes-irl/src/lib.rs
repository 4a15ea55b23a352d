//! Tabular workbench for Bayesian model-based inverse reinforcement learning.
//!
//! The library jointly estimates an expert's reward function and internal
//! transition model from demonstrations, under a prior that encodes how
//! accurate the expert's world model is believed to be. It provides:
//!
//! - exact entropy-regularized planning and occupancy machinery ([`mdp`]),
//! - the deterministic gridworld benchmark and its metrics ([`gridworld`]),
//! - posterior/surrogate objectives, exact gradients through the planner, and
//!   the BM-IRL / RM-IRL / two-stage training loops ([`estimation`]),
//! - Monte-Carlo rollout and score-function gradient estimators ([`sampling`]),
//! - numerical certification of the likelihood decomposition, the
//!   value-mismatch bound, the performance bound, and the unidentifiability
//!   construction ([`analysis`]),
//! - a reproducible experiment driver behind the `bayes-irl` binary
//!   ([`experiment`]).
//!
//! Every operation is deterministic given its seed; rerunning a command with
//! the same configuration produces byte-identical outputs.

pub mod analysis;
pub mod error;
pub mod estimation;
pub mod experiment;
pub mod gridworld;
pub mod mdp;
pub mod sampling;

pub use error::{Error, Result};
