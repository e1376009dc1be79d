//! Binary neural network optimization lab: a small tape autodiff engine,
//! binarized layers, a suite of first-order optimizers, training diagnostics
//! and loss-landscape tools.

pub mod autograd;
pub mod binary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod landscape;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
