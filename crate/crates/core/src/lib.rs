//! Bayesian SGD with Gaussian weight posteriors, dropout information
//! accounting, sequential evidence estimation and message-length ledgers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod bayes_lab;
pub mod checkpoint;
pub mod data;
pub mod dropout_info;
pub mod error;
pub mod ledger;
pub mod nn;
pub mod optim;
pub mod prior;
pub mod quadrature;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Concrete `f64` instantiations of the generic types.
pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Dataset = data::Dataset<f64>;
pub type GaussianState = prior::GaussianParamState<f64>;
pub type GaussianParam = prior::GaussianParam<f64>;
pub type BsgdOptimizer = optim::Bsgd<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;

/// Single-precision instantiations.
pub type Tensor32 = tensor::Tensor<f32>;
pub type GaussianState32 = prior::GaussianParamState<f32>;
