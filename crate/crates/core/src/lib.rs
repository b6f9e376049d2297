//! Memory-efficient Shampoo preconditioning.
//!
//! The preconditioner statistics of Shampoo are stored in low precision using
//! block-wise linear-2 quantization. Three storage strategies are provided
//! next to the 32-bit reference:
//!
//! - vanilla quantization of the statistics themselves (`Vq4`),
//! - quantization of their Cholesky factors (`Cq4`),
//! - Cholesky quantization with an exponentially averaged error-feedback
//!   state packed into the unused upper triangle of the factor grid (`Cq4Ef`).
//!
//! The crate is `no_std` and only needs `alloc`. File formats, reports and
//! the command-line harness live in the companion `qshampoo` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod linalg;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod problems;
pub mod quant;
pub mod snapshot;
pub mod state;

pub use linalg::{LinalgError, LowerTriangular, SpdMatrix};
pub use matrix::Matrix;
pub use optim::{BaseOptimizer, BaseOptimizerKind, Shampoo, ShampooConfig};
pub use quant::{CodebookKind, QuantCodebook, QuantError, QuantizedBlockMatrix, Quantizer};
pub use state::{ShampooLayerState, StateError, StateMode};
