//! Long-tail node classification with hierarchical task grouping and
//! balanced contrastive learning.
//!
//! The crate is organized bottom-up:
//!
//! * [`graph`]: labeled graphs, propagation matrices, long-tail statistics,
//!   splits, down-sampling and the synthetic block-model generator
//! * [`autodiff`]: a small reverse-mode engine over dense matrices
//! * [`model`]: the pooling/unpooling encoder and classifier
//! * [`losses`]: cross-entropy, balanced and supervised contrastive losses
//! * [`training`]: Adam, the training loop, classical baselines
//! * [`eval`]: long-tail metrics and the generalization-bound ledger

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod graph;
pub mod matrix;
pub mod model;
pub mod training;

pub use error::{Error, Result};
pub use graph::LabeledGraph;
pub use matrix::{CsrMatrix, Matrix};
