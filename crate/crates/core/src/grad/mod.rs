//! Reverse-mode automatic differentiation over dense tensors.

mod check;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use check::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, LrSchedule, OptimizerSettings};
pub use params::{Bound, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    TapeExhausted,
    #[error("no parameter named {0}")]
    MissingParam(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

impl GradError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        GradError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
