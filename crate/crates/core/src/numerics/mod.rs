//! A small dense tensor engine with a reverse-mode tape.
//!
//! Every reduction runs in a fixed sequential order and no kernel depends
//! on batch size or thread count for its summation order, so a forward
//! pass is bitwise reproducible. The coder relies on that: encoder and
//! decoder must quantize exactly the same probabilities.

mod graph;
mod optim;
mod params;
mod rng;
mod tensor;

pub use graph::{BatchStats, Graph, Var};
pub use optim::RmsProp;
pub use params::{GradStore, ParamId, ParamStore};
pub use rng::{counter_uniform, splitmix64};
pub use tensor::{gemm_nn, gemm_tn, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Whether stochastic layers (dropout, batch statistics) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const NORM_EPS: f64 = 1e-5;

#[cfg(test)]
mod gradcheck;
