//! The differentiation engine: dense matrices, a reverse-mode tape, and a
//! finite-difference gradient checker.

mod grad_check;
mod matrix;
mod tape;

pub use grad_check::{grad_check, GradCheckReport, TensorCheck};
pub use matrix::Matrix;
pub use tape::{DiffError, EdgeIndex, Segments, Tape, TensorId};
