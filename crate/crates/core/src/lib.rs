//! Cooperating region-proposal classifiers on a synthetic detection world.
//!
//! The crate trains an ensemble of N binary foreground/background classifiers
//! over a shared feature space. Per anchor, the most certain classifier is
//! selected for scoring and receives the routed cross-entropy gradient; a
//! log-determinant loss on the covariance of the ensemble's probabilities
//! keeps the classifiers distinct, and a hinge loss keeps all of them from
//! firmly rejecting foreground boxes. Everything runs on a deterministic
//! synthetic world small enough for experiments to finish in seconds.

pub mod checkpoint;
pub mod corpn;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod simworld;
pub mod train;
