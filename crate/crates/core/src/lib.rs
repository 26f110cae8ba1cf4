//! Max-margin discriminative feature learning.
//!
//! Learns a `d × r` projection `P` jointly with a max-margin classifier by
//! alternating closed-form classifier updates with L-BFGS updates of `P`.
//! The objective combines a quadratic hinge loss, a within-class scatter
//! penalty, a smoothed row-sparsity (`l2,1`) penalty on `P` and, for three
//! or more classes, a task-covariance penalty coupling the per-class weight
//! vectors.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod lbfgs;
pub mod model_file;
pub mod numerics;
pub mod objective;
pub mod solver;

pub use dataset::{LabeledDataset, StandardizationStats, SynthSpec};
pub use error::{Error, Result};
pub use graph::ClassPartition;
pub use lbfgs::{LbfgsConfig, LbfgsReport};
pub use numerics::SymMatrix;
pub use objective::{Hyperparams, MarginModel, ProjectionModel};
pub use solver::{fit, FitResult, TrainConfig, TrainReport};
