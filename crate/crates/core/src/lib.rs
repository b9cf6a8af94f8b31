//! Hidden Markov tree (HMT) models on the complete binary tree with a
//! finite hidden state space: tree combinatorics, exact root-conditioned
//! inference in the log domain, maximum likelihood estimation with score
//! and observed-information computations, and a Monte Carlo harness that
//! checks the mixing-rate inequalities and limit theorems the estimators
//! rely on.

pub mod error;
pub mod tree;
pub mod model;
pub mod simulate;
pub mod inference;
pub mod estimation;
pub mod ergodic;
pub mod stats;
pub mod experiments;

pub use error::{HmtError, Result};
