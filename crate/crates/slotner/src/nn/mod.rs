//! Minimal reverse-mode array engine: exactly the ops the model needs,
//! plus a finite-difference gradient checker.

pub mod attention;
pub mod gradcheck;
pub mod mask;
pub mod tape;
pub mod tensor;

pub use attention::masked_attention;
pub use gradcheck::{grad_check, GradCheckReport};
pub use mask::AttentionMask;
pub use tape::{Tape, VarId};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("expected a 2-d tensor, got shape {shape:?}")]
    NotTwoDimensional { shape: Vec<usize> },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("attention mask row {row} is fully blocked; its softmax would be undefined")]
    FullyBlockedRow { row: usize },
    #[error("mask pair ({row},{col}) lies outside the {rows}x{cols} mask")]
    MaskOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },
    #[error("head count {heads} does not divide hidden size {hidden}")]
    BadHeadCount { heads: usize, hidden: usize },
    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },
}
