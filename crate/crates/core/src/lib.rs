//! Sequence-to-function modeling for protein data: a dense-tensor autodiff
//! core, selective state-space and convolutional sequence models behind a
//! common architecture registry, amino-acid data ingestion, a training
//! engine with early stopping and checkpointing, and rank metrics.

pub mod arch;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pdb;
pub mod scalar;
pub mod scan;
pub mod tensor;
pub mod train;

pub use scalar::{Mode, Scalar, MODE_ENV};
pub use tensor::{ElemOp, Tape, Tensor, TensorError, TensorId};
