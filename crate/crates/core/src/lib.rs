//! Permutation-invariant similarity of trained neural-network weights.
//!
//! Networks trained on the same task by SGD land on weights that differ by
//! hidden-neuron permutations (and more). [`chain`] turns each prefix chain
//! of layers into a permutation-invariant Gram feature, [`metric`] learns a
//! softmax head over those features to classify and retrieve weights by
//! task, and [`harness`] runs the full train-then-test procedure that accepts
//! or rejects "runs of one task are equivalent" at a significance level.

pub mod chain;
pub mod cli;
pub mod error;
pub mod harness;
pub mod metric;
pub mod net;
pub mod seed;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
